"""Shared per-layer feature store read by the counterpart branch."""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass

import numpy as np

from dualsync.errors import ContractError


@dataclass(frozen=True)
class Snapshot:
    data: np.ndarray        # read-only
    version: int            # 0 means "never written"
    writer_step: int        # -1 before the first write
    checksum: int


def _checksum(arr: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(arr).tobytes())


class FeatureBuffer:
    """Latest post-self-attention features per (branch, layer).

    Writes publish a fresh read-only copy under a lock, so a reader always
    gets a whole tensor from a single write. Every version is kept in
    ``history`` so a recorded trace can be replayed.
    """

    def __init__(self, layers: int, keep_history: bool = True):
        self.layers = layers
        self._lock = threading.Lock()
        self._slots: dict[tuple[str, int], Snapshot] = {}
        self.keep_history = keep_history
        self.history: dict[tuple[str, int], list[Snapshot]] = {}

    def write(self, branch: str, layer: int, features, step: int) -> int:
        arr = np.array(features, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        digest = _checksum(arr)
        with self._lock:
            prev = self._slots.get((branch, layer))
            version = 1 if prev is None else prev.version + 1
            snap = Snapshot(arr, version, step, digest)
            self._slots[(branch, layer)] = snap
            if self.keep_history:
                self.history.setdefault((branch, layer), []).append(snap)
        return version

    def read(self, branch: str, layer: int) -> Snapshot | None:
        with self._lock:
            snap = self._slots.get((branch, layer))
        if snap is not None and _checksum(snap.data) != snap.checksum:
            raise ContractError(f"torn read on slot ({branch}, {layer})")
        return snap

    def version_of(self, branch: str, layer: int, version: int) -> Snapshot:
        """A past version from the history (used for trace replay)."""
        snaps = self.history.get((branch, layer), [])
        if not 1 <= version <= len(snaps):
            raise ContractError(f"slot ({branch}, {layer}) has no version {version}")
        return snaps[version - 1]
