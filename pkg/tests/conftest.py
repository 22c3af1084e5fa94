import numpy as np
import pytest

from encstream.codebook import activation_codebook_from_values, collect_activations, encode_weights
from encstream.tensor_nn import LayerSpec as L, NetworkSpec, init_params
from encstream.training import Encoding, encoding_overrides


def mlp(sizes, in_dim, relu_last=False):
    layers = []
    for k, n in enumerate(sizes):
        layers.append(L.fc(n, name=f"fc{k + 1}"))
        if k < len(sizes) - 1 or relu_last:
            layers.append(L.relu())
    return NetworkSpec(tuple(layers), (in_dim,), sizes[-1])


def encode_network(net, params, x, act_k=8, weight_k=16, seed=0):
    """Activation codebooks site by site (each from the already-encoded prefix) and weight codebooks."""
    acts = {}
    wts = {i: encode_weights(params[i]["W"], weight_k, seed)[1] for i in net.weight_layers()}
    for i in net.activation_sites():
        a = collect_activations(net, params, x, i, encoding_overrides(net, Encoding(acts)))
        acts[i] = activation_codebook_from_values(a, act_k, seed,
                                                  zero_anchored=net.layers[i].kind.value == "RELU")
    return Encoding(acts, wts)


def random_conv_net(rng, bn=True):
    """Small mixed CONV/BN/RELU/MAXPOOL/FC network with random geometry."""
    c0 = int(rng.integers(1, 3))
    hw = int(rng.choice([6, 8, 10]))
    c1 = int(rng.integers(2, 6))
    k = int(rng.choice([1, 3]))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    layers = [L.conv(c1, k, 1, pad, name="conv1")]
    if bn:
        layers.append(L.batchnorm())
    layers += [L.relu(), L.maxpool(2)]
    layers += [L.conv(int(rng.integers(2, 5)), 3, 1, 1, name="conv2"), L.relu()]
    layers += [L.fc(int(rng.integers(4, 12)), name="fc1")]
    if rng.random() < 0.5:
        layers.append(L.batchnorm())
    layers += [L.relu(), L.fc(int(rng.integers(2, 6)), name="fc2")]
    net = NetworkSpec(tuple(layers), (c0, hw, hw), layers[-1].out_features)
    params = init_params(net, int(rng.integers(1 << 30)))
    for i, layer in enumerate(net.layers):
        if layer.kind.value == "BATCHNORM":
            n = params[i]["alpha"].shape[0]
            params[i]["alpha"] = rng.uniform(0.5, 1.5, n).astype(np.float32)
            params[i]["beta"] = rng.uniform(-0.2, 0.2, n).astype(np.float32)
        if "b" in params[i]:
            params[i]["b"] = rng.normal(0, 0.1, params[i]["b"].shape).astype(np.float32)
    return net, params


@pytest.fixture(scope="session")
def mnist():
    """The 5,000 bundled MNIST digits, routed through the IDX writer/reader and shuffled."""
    data = pytest.importorskip("mlxtend.data")
    import tempfile
    from pathlib import Path

    from encstream.datasets import load_dataset, write_idx
    x, y = data.mnist_data()
    with tempfile.TemporaryDirectory() as d:
        img = Path(d) / "mnist-images-idx3-ubyte"
        write_idx(img, x.reshape(-1, 28, 28).astype(np.uint8))
        write_idx(Path(d) / "mnist-labels-idx1-ubyte", y.astype(np.uint8))
        x, y = load_dataset(img)
    # the bundled subset is sorted by label
    perm = np.random.default_rng(0).permutation(len(y))
    return x[perm].reshape(len(y), -1), y[perm]


def exhaustive_choice(net, params, base_enc, config, mode, val_set, act_samples=None, seed=42,
                      eps=1e-4):
    """Independent re-enumeration of one search iteration.

    Builds every single-layer reduction from scratch, scores it by
    dM / max(dA, eps) against ``config``'s own accuracy, and returns
    (layer position, bits) of the best one: ties go to the lowest position,
    then the lowest bitwidth.
    """
    from encstream.bitwidth import memory_footprint
    from encstream.training import encoded_accuracy

    sites = net.activation_sites() if mode == "activations" else net.weight_layers()

    def build(layer, b):
        if mode == "weights":
            return encode_weights(params[layer]["W"], 2 ** b, seed)[1]
        zero = net.layers[layer].kind.value == "RELU"
        return activation_codebook_from_values(act_samples[layer], 2 ** b, seed, zero)

    def enc_for(cfg):
        act, wts = dict(base_enc.act), dict(base_enc.weights)
        for pos, layer in enumerate(sites):
            b = cfg.bits(mode)[pos]
            target = act if mode == "activations" else wts
            if b is None:
                target.pop(layer, None)
            else:
                target[layer] = build(layer, b)
        return Encoding(act, wts)

    acc0 = encoded_accuracy(net, params, enc_for(config), val_set)
    mem0 = memory_footprint(net, config)
    best = None
    for pos in range(len(sites)):
        cur = config.bits(mode)[pos]
        if cur is None:
            continue
        for b in range(1, cur):
            cfg = config.with_bits(mode, pos, b)
            acc = encoded_accuracy(net, params, enc_for(cfg), val_set)
            r = (mem0 - memory_footprint(net, cfg)) / max(acc0 - acc, eps)
            if best is None or r > best[0]:
                best = (r, pos, b, acc)
    return best
