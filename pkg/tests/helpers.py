"""Shared fixtures-by-hand for the fitting and synthesis tests."""

import numpy as np

from articulate.model import build_model
from articulate.synthetic import SyntheticConfig, make_corpus, plant_correspondence


def small_world(seed=0, grid=6, speakers=3, poses=4, coils=("T1", "T2", "T3")):
    """Small deterministic model plus a planted correspondence."""
    cfg = SyntheticConfig(seed=seed, grid=grid, speakers=speakers, poses=poses,
                          coils=tuple(coils))
    rng = np.random.default_rng(seed)
    corpus = make_corpus(rng, cfg)
    model, u1, u2 = build_model(corpus)
    corr = plant_correspondence(rng, model, coils)
    return model, corr, rng


def box_sample(rng, stats, c, margin=0.9):
    """Uniform draw strictly inside the c-sigma box."""
    lo, hi = stats.box(c * margin)
    return rng.uniform(lo, hi)


def smooth_trajectory(rng, stats, T, c=1.0, smooth=15):
    """Slow random walk inside the c-sigma box (for fit tests)."""
    raw = rng.standard_normal((T + smooth, stats.mean.size))
    kernel = np.hanning(smooth + 2)[1:-1]
    kernel /= kernel.sum()
    out = np.empty_like(raw)
    for d in range(raw.shape[1]):
        out[:, d] = np.convolve(raw[:, d], kernel, mode="same")
    out = out[smooth // 2: smooth // 2 + T]
    out /= max(np.abs(out).max(), 1e-12)
    return stats.mean + out * stats.sigma * c
