"""memory.py — Long-range memory bank of detached concurrent-action maps and LRCI composition."""

from __future__ import annotations

import struct
import threading
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from gcm.tensor import DimensionError, Value, constant, place_rows, reshape, take_rows

if TYPE_CHECKING:
    from gcm.grammar import GcmParams

BANK_MAGIC = b"GCMBANK\x00"
BANK_VERSION = 1
# magic, format version, d_map, t_window, entry count
_HEADER = struct.Struct("<8sHIIQ")
# video id byte length, clip time, write version
_ENTRY = struct.Struct("<HqQ")


@dataclass(frozen=True)
class BankEntry:
    map: np.ndarray  # read-only (d_map,)
    version: int


@dataclass(frozen=True)
class BankView:
    """The 2T slots around one clip, ordered by time (t = 0 excluded)."""

    clip_time: int
    offsets: np.ndarray  # (2T,) in −T..−1, +1..+T
    maps: np.ndarray  # (2T, d_map); zero where unavailable
    mask: np.ndarray  # (2T,) 1.0 where a stored map exists

    @property
    def timestamps(self) -> np.ndarray:
        return self.clip_time + self.offsets

    @property
    def n_available(self) -> int:
        return int(self.mask.sum())


def window_offsets(t_window: int) -> np.ndarray:
    return np.concatenate([np.arange(-t_window, 0), np.arange(1, t_window + 1)]).astype(np.int64)


class MemoryBank:
    """Per-video, per-second store of detached S_A maps.

    Writes replace whole entries; readers keep whatever arrays they already
    hold, so a view is a snapshot that later writes never change.
    """

    def __init__(self, d_map: int, t_window: int) -> None:
        if d_map <= 0 or t_window < 0:
            raise ValueError(f"bad bank shape d_map={d_map}, t_window={t_window}")
        self.d_map = d_map
        self.t_window = t_window
        self._store: dict[tuple[str, int], BankEntry] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, key: tuple[str, int]) -> bool:
        return key in self._store

    def get(self, video_id: str, clip_time: int) -> BankEntry | None:
        return self._store.get((video_id, int(clip_time)))

    def entries(self) -> Iterator[tuple[tuple[str, int], BankEntry]]:
        """Yield ``((video_id, clip_time), entry)`` sorted by key."""
        for key in sorted(self._store):
            yield key, self._store[key]

    def write(self, video_id: str, clip_time: int, values) -> int:
        """Store a detached copy of *values*; return the entry's new version.

        Raises:
            DimensionError: *values* is not a ``(d_map,)`` vector.
            ValueError:     *values* contains non-finite numbers.
        """
        if isinstance(values, Value):
            values = values.data
        arr = np.array(values, dtype=np.float64)
        if arr.shape != (self.d_map,):
            raise DimensionError(f"bank write: shape {arr.shape}, expected ({self.d_map},)")
        if not np.isfinite(arr).all():
            raise ValueError(f"bank write: non-finite map for {video_id}@{clip_time}")
        arr.setflags(write=False)
        key = (video_id, int(clip_time))
        with self._lock:
            old = self._store.get(key)
            version = 1 if old is None else old.version + 1
            self._store[key] = BankEntry(arr, version)
        return version

    def read_window(self, video_id: str, clip_time: int) -> BankView:
        """Collect the 2T neighbours of *clip_time*; missing ones are masked zeros."""
        offsets = window_offsets(self.t_window)
        maps = np.zeros((offsets.size, self.d_map))
        mask = np.zeros(offsets.size)
        store = self._store
        for k, off in enumerate(offsets):
            entry = store.get((video_id, int(clip_time + off)))
            if entry is not None:
                maps[k] = entry.map
                mask[k] = 1.0
        return BankView(int(clip_time), offsets, maps, mask)

    # -- persistence -------------------------------------------------------------

    def save(self, path: Path) -> None:
        """Write the bank as one binary file (entries sorted by key)."""
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(BANK_MAGIC, BANK_VERSION, self.d_map, self.t_window, len(self._store)))
            for (video_id, clip_time), entry in self.entries():
                vid = video_id.encode("utf-8")
                fh.write(_ENTRY.pack(len(vid), clip_time, entry.version))
                fh.write(vid)
                fh.write(entry.map.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: Path) -> MemoryBank:
        """Read a file written by :meth:`save`.

        Raises:
            ValueError: bad magic, unsupported version, or truncated file.
        """
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated bank header")
        magic, version, d_map, t_window, count = _HEADER.unpack_from(raw, 0)
        if magic != BANK_MAGIC:
            raise ValueError(f"{path}: not a bank file")
        if version != BANK_VERSION:
            raise ValueError(f"{path}: unsupported bank version {version}")
        bank = cls(d_map, t_window)
        pos = _HEADER.size
        width = 8 * d_map
        for _ in range(count):
            if pos + _ENTRY.size > len(raw):
                raise ValueError(f"{path}: truncated bank entry")
            n_vid, clip_time, entry_version = _ENTRY.unpack_from(raw, pos)
            pos += _ENTRY.size
            end = pos + n_vid + width
            if end > len(raw):
                raise ValueError(f"{path}: truncated bank entry")
            video_id = raw[pos : pos + n_vid].decode("utf-8")
            arr = np.frombuffer(raw, dtype="<f8", count=d_map, offset=pos + n_vid).astype(np.float64)
            arr.setflags(write=False)
            bank._store[(video_id, int(clip_time))] = BankEntry(arr, int(entry_version))
            pos = end
        if pos != len(raw):
            raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
        return bank


# ── LRCI composition ───────────────────────────────────────────────────────────


def lrci_compose(
    current: Value, views: Sequence[BankView], params: GcmParams
) -> tuple[Value, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """S_A* = And(S_A, S_L) with S_L the Or over available window slots.

    Each available slot is first paired with the current map by an And node,
    so the Or scores a slot by how it relates to the clip asking.  Slot maps
    enter as constants, so no gradient reaches the bank.  A view with nothing
    available (or T = 0) gives S_L = 0 and all-zero λ_t.

    Returns:
        ``(S_A*, (λ_t, timestamps, availability))`` with per-clip rows.
    """
    from gcm.grammar import and_compose, or_select  # noqa: PLC0415

    if len(views) != current.shape[0]:
        raise ValueError(f"lrci_compose: {len(views)} views for {current.shape[0]} clips")
    dm = current.shape[-1]
    n_slots = 2 * params.config.t_window
    maps = np.zeros((len(views), n_slots, dm))
    mask = np.zeros((len(views), n_slots))
    times = np.zeros((len(views), n_slots), dtype=np.int64)
    for i, view in enumerate(views):
        if view.maps.shape != (n_slots, dm):
            raise DimensionError(
                f"lrci_compose: view has shape {view.maps.shape}, expected ({n_slots}, {dm})"
            )
        maps[i] = view.maps
        mask[i] = view.mask
        times[i] = view.timestamps

    assert params.lrci_pair is not None and params.lrci_or is not None and params.lrci_and is not None
    b = len(views)
    present = np.flatnonzero(mask.reshape(-1) > 0)
    if present.size == 0:
        pairs = constant(np.zeros((b, n_slots, dm)))
    else:
        slot_rows = constant(maps.reshape(b * n_slots, dm)[present])
        paired = and_compose([take_rows(current, present // n_slots), slot_rows], params.lrci_pair)
        pairs = reshape(place_rows(paired, present, b * n_slots), (b, n_slots, dm))
    support = or_select(pairs, mask, params.lrci_or)
    star = and_compose([current, support.output], params.lrci_and)
    return star, (support.weights.data.copy(), times, mask > 0)
