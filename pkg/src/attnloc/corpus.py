"""Byte-level text corpus mapped to continuous tokens through a frozen Gaussian table."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class CorpusEmbedding:
    table: np.ndarray  # (256, d)
    T: int

    @classmethod
    def create(cls, d: int, T: int, seed: int = 0):
        rng = np.random.default_rng([seed, 256])
        return cls(table=rng.standard_normal((256, d)), T=T)

    @property
    def d(self) -> int:
        return self.table.shape[1]

    def windows(self, data: bytes) -> np.ndarray:
        """Byte windows of length ``T + 1`` taken with stride ``T``; shape ``(m, T + 1)``."""
        arr = np.frombuffer(data, dtype=np.uint8)
        if arr.size < self.T + 1:
            raise ValueError(f"corpus has {arr.size} bytes, need at least T + 1 = {self.T + 1}")
        starts = np.arange(0, arr.size - self.T, self.T)
        return arr[starts[:, None] + np.arange(self.T + 1)]

    def embed(self, windows) -> tuple[np.ndarray, np.ndarray]:
        """``(X (m, d, T), Y (m, d))`` from byte windows."""
        E = self.table[np.asarray(windows)]  # (m, T+1, d)
        return np.transpose(E[:, :-1], (0, 2, 1)).copy(), E[:, -1].copy()


class CorpusBatches:
    """Draws random windows of a corpus file; batch ``k`` depends only on ``(seed, k)``."""

    def __init__(self, path, d: int, T: int, seed: int = 0):
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise ValueError(f"cannot read corpus {path}: {exc}") from exc
        self.embedding = CorpusEmbedding.create(d, T, seed)
        self.windows = self.embedding.windows(data)
        self.seed = seed

    def batch(self, k: int, size: int):
        rng = np.random.default_rng([self.seed, 7, k])
        idx = rng.integers(0, len(self.windows), size)
        return self.embedding.embed(self.windows[idx])
