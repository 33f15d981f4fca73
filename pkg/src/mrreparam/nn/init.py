import numpy as np


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """(fan_in, fan_out) for a [F, C, k, k] kernel (also used for [C, F, k, k])."""
    if len(shape) < 2:
        raise ValueError(f"fan computation needs at least 2 dims, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape, rng_seed=None) -> np.ndarray:
    """Glorot-normal samples: zero mean, variance 2 / (fan_in + fan_out).

    ``rng_seed`` may be an int seed or an existing ``np.random.Generator``;
    an int always yields the same array.
    """
    shape = tuple(int(s) for s in shape)
    fan_in, fan_out = fans(shape)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal(shape) * std).astype(np.float32)
