"""Sliding windows over a frame sequence and anchor sampling inside them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class WindowConfig:
    window_len: int = 5
    stride: int = 3
    num_anchors: int = 3
    temporal_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.window_len < 2:
            raise InvalidArgumentError(f"window length must be >= 2, got {self.window_len}")
        if not 1 <= self.num_anchors <= self.window_len:
            raise InvalidArgumentError(
                f"need 1 <= num_anchors <= window_len, got {self.num_anchors} and {self.window_len}"
            )
        if self.stride < 1 or self.temporal_stride < 1:
            raise InvalidArgumentError("strides must be >= 1")


@dataclass(frozen=True)
class Window:
    frame_ids: tuple
    anchors: tuple = ()

    def __post_init__(self):
        ids = tuple(int(i) for i in self.frame_ids)
        object.__setattr__(self, "frame_ids", ids)
        object.__setattr__(self, "anchors", tuple(int(a) for a in self.anchors))
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise InvalidArgumentError(f"frame ids must increase strictly: {ids}")
        if len(set(self.anchors)) != len(self.anchors) or not set(self.anchors) <= set(ids):
            raise InvalidArgumentError(f"anchors {self.anchors} must be distinct members of {ids}")

    def __len__(self):
        return len(self.frame_ids)

    def sources(self, anchor) -> tuple:
        """Frames that act as source views for ``anchor``."""
        return tuple(f for f in self.frame_ids if f != anchor)

    def anchor_positions(self) -> list:
        """Anchors as indices into ``frame_ids``."""
        return [self.frame_ids.index(a) for a in self.anchors]

    def with_all_anchors(self) -> Window:
        return Window(self.frame_ids, self.frame_ids)


def make_windows(seq_len: int, cfg: WindowConfig) -> list:
    """Overlapping windows starting at frame 0, ``stride`` window-steps apart.

    With ``temporal_stride > 1`` windows live on the subsampled lattice
    ``0, ts, 2 ts, ...``. If the stride leaves a remainder, one more window is
    snapped to end on the last lattice frame so every lattice frame is covered.
    """
    S, ts = cfg.window_len, cfg.temporal_stride
    if seq_len < S * ts:
        raise InvalidArgumentError(f"sequence of {seq_len} frames is shorter than S * ts = {S * ts}")
    n = (seq_len - 1) // ts + 1  # frames on the lattice
    starts = list(range(0, n - S + 1, cfg.stride))
    if starts[-1] != n - S:
        starts.append(n - S)
    return [Window(tuple((s + i) * ts for i in range(S))) for s in starts]


def sample_anchors(w: Window, cfg: WindowConfig, rng=None) -> Window:
    """Draw ``num_anchors`` distinct anchors uniformly without replacement.

    ``rng`` may be a Generator or a seed; ``None`` uses ``cfg.seed``.
    """
    if cfg.num_anchors > len(w):
        raise InvalidArgumentError(f"cannot draw {cfg.num_anchors} anchors from {len(w)} frames")
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    picked = rng.choice(len(w), size=cfg.num_anchors, replace=False)
    return Window(w.frame_ids, tuple(w.frame_ids[i] for i in sorted(picked)))
