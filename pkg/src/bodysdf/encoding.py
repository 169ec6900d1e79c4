"""Sinusoidal positional encoding with a progressive frequency window.

Band j carries frequency 2^j * pi (coordinates live in [-1, 1]) and a
cosine-ramp weight w_j = (1 - cos(pi * clamp(alpha - j, 0, 1))) / 2, so the
spectrum opens smoothly as training progresses.
"""

from dataclasses import dataclass

import numpy as np

from .diffcore import Dual, dual_concat


@dataclass
class EncodingConfig:
    num_frequencies: int = 6
    ramp_fraction: float = 0.4

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ValueError("ramp_fraction must be in (0, 1]")

    @property
    def output_dim(self):
        return 3 + 6 * self.num_frequencies


def band_weights(config, alpha):
    """Per-band window weights for progress alpha in [0, L]."""
    j = np.arange(config.num_frequencies, dtype=np.float64)
    return (1.0 - np.cos(np.pi * np.clip(alpha - j, 0.0, 1.0))) / 2.0


def encode(x, config, alpha):
    """Encode points (N, 3) -> (N, 3 + 6L) with windowed sin/cos bands."""
    x = np.asarray(x, dtype=np.float64)
    w = band_weights(config, alpha)
    parts = [x]
    for jj in range(config.num_frequencies):
        arg = x * (np.pi * 2.0 ** jj)
        parts.append(w[jj] * np.sin(arg))
        parts.append(w[jj] * np.cos(arg))
    return np.concatenate(parts, axis=-1)


def encode_dual(xd, config, alpha):
    """Dual/tape version of encode; xd primal shape (..., 3)."""
    w = band_weights(config, alpha)
    parts = [xd]
    for jj in range(config.num_frequencies):
        arg = xd * (np.pi * 2.0 ** jj)
        parts.append(arg.sin() * w[jj])
        parts.append(arg.cos() * w[jj])
    return dual_concat(parts, axis=-1) if isinstance(xd, Dual) else _concat_plain(parts)


def _concat_plain(parts):
    from . import diffcore as dc

    return dc.concat(parts, axis=-1)


def alpha_schedule(step, total_steps, config):
    """Linear ramp: alpha = L * min(1, step / (ramp_fraction * total_steps))."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    frac = step / (config.ramp_fraction * total_steps)
    return config.num_frequencies * min(1.0, frac)
