"""Codebook-encoded DNNs and a streaming accelerator model.

Modules:
  tensor_nn    float32 layers, forward/backward, im2col
  codebook     K-means codebooks, encode/decode, binary codebook files
  training     encoded forward/backward rules and SGD fine-tuning
  bitwidth     memory model and greedy per-layer bitwidth search
  hw_compiler  lowering to MVAU/MPU stages, folding, resources, artifacts
  accel_sim    functional and cycle-level pipeline simulation
  datasets     IDX / CSV loaders
  cli          ``encstream`` command
"""
__version__ = "0.1.0"
