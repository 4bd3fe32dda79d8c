"""Named, independent random streams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


class RngTree:
    """``stream(label, index)`` hashes ``(root, label, index)`` into a Philox key.

    Derivation is pure: the same triple always yields a generator in the same
    state, whatever else was drawn before.
    """

    def __init__(self, root: int):
        self.root = int(root)

    def key(self, label: str, index: int = 0) -> int:
        digest = hashlib.sha256(f"{self.root}\x1f{label}\x1f{int(index)}".encode()).digest()
        return int.from_bytes(digest[:16], "little")

    def stream(self, label: str, index: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(label, index)))

    def child(self, label: str, index: int = 0) -> "RngTree":
        return RngTree(self.key(label, index) & ((1 << 63) - 1))
