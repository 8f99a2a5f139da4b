"""Synthetic fixtures: an oriented-grating dataset and tiny weight files.

The dataset gives each subject its own grating orientation and spatial
frequency; individual images jitter the orientation, frequency, phase,
and amplitude and add pixel noise.  Subjects are separable by
construction (orientations are spread over the half circle and
frequencies cycle through distinct bands), which anchors the end-to-end
benchmark without shipping any real biometric data.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import cnn
from .dataset import ImageTensor, write_pgm

DEFAULT_SEED = 1337

_BASE_FREQUENCIES = (10.0, 14.0, 19.0, 26.0)  # cycles per image width


def make_synthetic_dataset(
    root,
    subjects: int = 20,
    images_per_subject: int = 10,
    size: int = 128,
    seed: int = DEFAULT_SEED,
    orientation_jitter_deg: float = 1.0,
    frequency_jitter: float = 0.03,
    noise_sigma: float = 10.0,
) -> Path:
    """Write ``subjects`` x ``images_per_subject`` grating PGMs under root."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    for s in range(subjects):
        subject_dir = root / f"s{s:03d}"
        subject_dir.mkdir(parents=True, exist_ok=True)
        base_theta = np.pi * (s + 0.5) / subjects
        base_freq = _BASE_FREQUENCIES[s % len(_BASE_FREQUENCIES)]
        for i in range(images_per_subject):
            theta = base_theta + rng.normal(0.0, np.deg2rad(orientation_jitter_deg))
            freq = base_freq * (1.0 + rng.normal(0.0, frequency_jitter))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amplitude = 80.0 * (1.0 + rng.normal(0.0, 0.05))
            carrier = 2.0 * np.pi * freq * (rows * np.cos(theta) + cols * np.sin(theta)) / size
            grating = 127.5 + amplitude * np.cos(carrier + phase)
            grating += rng.normal(0.0, noise_sigma, size=(size, size))
            pixels = np.clip(np.rint(grating), 0, 255)
            write_pgm(subject_dir / f"img{i:02d}.pgm", ImageTensor(pixels[:, :, None]))
    return root


def tiny_network_spec(input_size: int = 8) -> cnn.NetworkSpec:
    """A small conv/pool/fc net for tests and CLI smoke runs."""
    return cnn.NetworkSpec(
        layers=(
            cnn.LayerSpec("conv1", "conv", out_channels=4),
            cnn.LayerSpec("relu1", "relu"),
            cnn.LayerSpec("pool1", "maxpool"),
            cnn.LayerSpec("conv2", "conv", out_channels=6),
            cnn.LayerSpec("relu2", "relu"),
            cnn.LayerSpec("pool2", "maxpool"),
            cnn.LayerSpec("flatten", "flatten"),
            cnn.LayerSpec("fc1", "fc", out_features=10),
        ),
        input_shape=(input_size, input_size, 3),
    )


def random_weights(spec: cnn.NetworkSpec, seed: int = DEFAULT_SEED) -> cnn.WeightStore:
    """Gaussian weights scaled by fan-in so activations stay well-ranged."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer, (wshape, bshape) in cnn.expected_weight_shapes(spec).items():
        fan_in = int(np.prod(wshape[1:]))
        weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=wshape).astype(np.float32)
        bias = rng.normal(0.0, 0.01, size=bshape).astype(np.float32)
        tensors[layer] = (weight, bias)
    return cnn.WeightStore(tensors)


def make_tiny_network(out_dir, input_size: int = 8, seed: int = DEFAULT_SEED):
    """Write tiny_net.json and tiny_net.vggw under out_dir; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = tiny_network_spec(input_size)
    spec_path = out_dir / "tiny_net.json"
    spec_path.write_text(json.dumps(cnn.network_spec_to_json(spec), indent=2) + "\n")
    weights_path = out_dir / "tiny_net.vggw"
    cnn.save_weights(weights_path, spec, random_weights(spec, seed))
    return spec_path, weights_path
