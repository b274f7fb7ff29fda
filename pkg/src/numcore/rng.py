"""
Deterministic Random Streams

Every random draw in the package goes through Rng, a thin wrapper around
numpy's Philox4x64-10 counter-based generator. The seed is used directly as
the Philox key (no hashing), and sub-streams are selected through the most
significant counter word, so a given (seed, stream) pair yields the same bytes
on every platform and numpy release that ships Philox. A child stream is the
sha256 of its parent stream and key, so nested children never collide.
"""

import hashlib
from typing import Sequence, Tuple, Union

import numpy as np

from .tensor import Tensor

_MASK64 = (1 << 64) - 1

Shape = Union[int, Sequence[int], Tuple[int, ...]]


class Rng:
    """
    Seeded counter-based random stream.

    Attributes:
        seed: 64-bit key of the Philox generator
        stream: Sub-stream index (most significant counter word)
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        bit_generator = np.random.Philox(key=self.seed, counter=[0, 0, 0, self.stream])
        self.generator = np.random.Generator(bit_generator)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream}, algorithm={self.algorithm!r})"

    def child(self, key: int) -> "Rng":
        """Independent stream under the same seed (e.g. one per sample index)."""
        digest = hashlib.sha256(f"{self.stream}/{int(key)}".encode("ascii")).digest()
        return Rng(self.seed, int.from_bytes(digest[:8], "little"))

    def random(self, shape: Shape = ()) -> np.ndarray:
        """Draws in the open interval (0, 1); exact zeros are redrawn."""
        shape = _as_shape(shape)
        draws = np.asarray(self.generator.random(size=shape), dtype=np.float64).reshape(shape)
        zeros = draws == 0.0
        while np.any(zeros):
            draws[zeros] = self.generator.random(size=int(zeros.sum()))
            zeros = draws == 0.0
        return draws

    def normal(self, shape: Shape, scale: float = 1.0) -> np.ndarray:
        shape = _as_shape(shape)
        return np.asarray(self.generator.standard_normal(size=shape), dtype=np.float64) * scale

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def _as_shape(shape: Shape) -> Tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def uniform(rng: Rng, shape: Shape = ()) -> Tensor:
    """
    Uniform draws strictly inside (0, 1), so log(u) and log(1 - u) are finite.

    Args:
        rng: Source stream
        shape: Output shape; an empty shape gives a scalar

    Returns:
        Graph-free Tensor of draws
    """
    return Tensor(rng.random(shape))
