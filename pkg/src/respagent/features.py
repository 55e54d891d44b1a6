"""Framewise toy audio features.

Stands in for a pretrained audio encoder: each frame is a Hann-windowed FFT
whose power is summed into ``n_bands`` linearly spaced bands and log-compressed.
Any callable ``waveform -> (frames, D)`` can replace it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np


class FeatureExtractor(Protocol):
    feature_dim: int

    def __call__(self, waveform: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ToyExtractor:
    feature_dim: int = 16
    frame_len: int = 128
    hop: int = 60
    eps: float = 1e-8

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            return 0
        return 1 + (n_samples - self.frame_len) // self.hop

    def __call__(self, waveform: np.ndarray) -> np.ndarray:
        x = np.asarray(waveform, dtype=np.float64)
        n = self.n_frames(len(x))
        if n == 0:
            return np.zeros((0, self.feature_dim), dtype=np.float32)
        starts = np.arange(n) * self.hop
        frames = x[starts[:, None] + np.arange(self.frame_len)[None, :]]
        frames = frames * np.hanning(self.frame_len)[None, :]
        power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
        # drop DC; split remaining bins into contiguous bands
        bands = np.array_split(power[:, 1:], self.feature_dim, axis=1)
        energy = np.stack([b.sum(axis=1) for b in bands], axis=1)
        return np.log(energy + self.eps).astype(np.float32)


def crackle_spike(features: np.ndarray, top_bands: int = 4) -> float:
    """Peak-over-median of the upper-band log energy.

    Broadband transients light up the top bands for one or two frames while
    stationary noise does not, so this separates clips with injected impulses.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.shape[0] == 0:
        return 0.0
    hi = f[:, -top_bands:].mean(axis=1)
    return float(hi.max() - np.median(hi))
