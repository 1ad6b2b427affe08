"""Shared builders for the test suite."""

import numpy as np

from splitfed.tensor import Conv2D, Dense, Flatten, MaxPool, ReLU, build_network, mlp


def random_mlp(rng: np.random.Generator, seed: int):
    depth = int(rng.integers(2, 5))
    sizes = [int(rng.integers(2, 7)) for _ in range(depth)] + [int(rng.integers(2, 5))]
    return mlp(sizes, seed=seed)


def small_cnn(seed: int = 0, classes: int = 3):
    layers = [
        Conv2D(in_ch=1, out_ch=2, kernel=3, pad=1),
        ReLU(),
        MaxPool(window=2),
        Conv2D(in_ch=2, out_ch=3, kernel=2, stride=1),
        ReLU(),
        Flatten(),
        Dense(in_dim=12, out_dim=classes),
    ]
    return build_network(layers, (1, 6, 6), classes, seed=seed)


def random_input(net, batch: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((batch, *net.input_shape))
