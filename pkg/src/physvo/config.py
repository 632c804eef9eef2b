"""Flat ``key = value`` configuration files with dotted section keys.

A file looks like::

    # comment
    window.len = 5
    loss.mu = 0.85
    chain_mode = similarity

Blank lines and ``#`` comments are ignored. Keys are unique. The canonical form
written by :func:`format_kv` sorts keys and uses ``repr`` for floats, so
``format_kv(parse(file))`` round-trips.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidArgumentError, ParseError
from .losses import LossConfig
from .optimize import OptimConfig
from .windows import WindowConfig


def parse_kv(text: str, path=None) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", path=path, line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ParseError(f"invalid key {key!r}", path=path, line=lineno)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", path=path, line=lineno)
        out[key] = value
    return out


def format_kv(kv: dict) -> str:
    return "".join(f"{k} = {kv[k]}\n" for k in sorted(kv))


def read_kv(path) -> dict:
    path = Path(path)
    return parse_kv(path.read_text(), path=path)


def write_kv(path, kv: dict) -> None:
    from .trajectory import atomic_write_text

    atomic_write_text(path, format_kv(kv))


# ---------------------------------------------------------------------------
# Run configuration

# file key -> (section, dataclass field)
_WINDOW_KEYS = {
    "window.len": "window_len",
    "window.stride": "stride",
    "window.anchors": "num_anchors",
    "window.temporal_stride": "temporal_stride",
    "window.seed": "seed",
}
_LOSS_KEYS = {
    "loss.mu": "mu",
    "loss.lambda_geo": "lambda_geo",
    "loss.lambda_smooth": "lambda_smooth",
    "loss.delta": "delta",
    "loss.epsilon": "epsilon",
    "loss.mask_smoothness": "mask_smoothness",
}
_OPTIM_KEYS = {
    "optim.max_iters": "max_iters",
    "optim.step_size": "step_size",
    "optim.decay": "decay",
    "optim.grad_tol": "grad_tol",
    "optim.depth_lr_scale": "depth_lr_scale",
    "optim.max_backtracks": "max_backtracks",
    "optim.pose_metric": "pose_metric",
    "optim.momentum": "momentum",
    "optim.loss_tol": "loss_tol",
}
_INIT_STRATEGIES = ("constant", "perturbed", "file")


def _convert(text: str, like):
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    window: WindowConfig = field(default_factory=WindowConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    chain_mode: str = "similarity"
    resize: tuple | None = None  # (W, H)
    output_dir: str = "out"
    seed: int = 0
    init: str = "constant"
    depth_guess: float = 10.0
    forward_step: float = 0.0
    pose_noise_m: float = 0.0
    pose_noise_deg: float = 0.0
    depth_noise: float = 0.0
    color: bool = False

    def __post_init__(self):
        if self.chain_mode not in ("rigid", "similarity"):
            raise InvalidArgumentError(f"chain_mode must be rigid or similarity, got {self.chain_mode!r}")
        if self.resize is not None:
            w, h = (int(v) for v in self.resize)
            if w < 32 or h < 32:
                raise InvalidArgumentError(f"resize dimensions must be >= 32, got {w}x{h}")
            object.__setattr__(self, "resize", (w, h))
        if self.init not in _INIT_STRATEGIES:
            raise InvalidArgumentError(f"init must be one of {_INIT_STRATEGIES}, got {self.init!r}")
        if self.depth_guess <= 0:
            raise InvalidArgumentError("depth_guess must be positive")

    # -- conversion -----------------------------------------------------
    def to_kv(self) -> dict:
        kv = {}
        for table, sub in ((_WINDOW_KEYS, self.window), (_LOSS_KEYS, self.loss), (_OPTIM_KEYS, self.optim)):
            for key, attr in table.items():
                kv[key] = _render(getattr(sub, attr))
        kv["chain_mode"] = self.chain_mode
        kv["resize"] = "none" if self.resize is None else f"{self.resize[0]} {self.resize[1]}"
        kv["output_dir"] = self.output_dir
        kv["seed"] = str(self.seed)
        kv["init.strategy"] = self.init
        kv["init.depth_guess"] = _render(self.depth_guess)
        kv["init.forward_step"] = _render(self.forward_step)
        kv["init.pose_noise_m"] = _render(self.pose_noise_m)
        kv["init.pose_noise_deg"] = _render(self.pose_noise_deg)
        kv["init.depth_noise"] = _render(self.depth_noise)
        kv["color"] = _render(self.color)
        return kv

    @classmethod
    def from_kv(cls, kv: dict, path=None) -> RunConfig:
        """Build from parsed entries; missing keys keep their defaults."""
        known = set(_WINDOW_KEYS) | set(_LOSS_KEYS) | set(_OPTIM_KEYS) | set(cls().to_kv())
        unknown = sorted(set(kv) - known)
        if unknown:
            raise ParseError(f"unknown configuration keys: {', '.join(unknown)}", path=path)
        try:
            subs = []
            for table, default in ((_WINDOW_KEYS, WindowConfig()), (_LOSS_KEYS, LossConfig()), (_OPTIM_KEYS, OptimConfig())):
                args = {attr: _convert(kv[key], getattr(default, attr)) for key, attr in table.items() if key in kv}
                subs.append(dataclasses.replace(default, **args))
            base = cls()
            top = {}
            simple = {
                "chain_mode": "chain_mode",
                "output_dir": "output_dir",
                "seed": "seed",
                "init.strategy": "init",
                "init.depth_guess": "depth_guess",
                "init.forward_step": "forward_step",
                "init.pose_noise_m": "pose_noise_m",
                "init.pose_noise_deg": "pose_noise_deg",
                "init.depth_noise": "depth_noise",
                "color": "color",
            }
            for key, attr in simple.items():
                if key in kv:
                    top[attr] = _convert(kv[key], getattr(base, attr))
            if "resize" in kv:
                text = kv["resize"].strip().lower()
                if text != "none":
                    parts = text.replace("x", " ").split()
                    if len(parts) != 2:
                        raise ValueError(f"resize needs 'W H', got {kv['resize']!r}")
                    top["resize"] = (int(parts[0]), int(parts[1]))
            return cls(window=subs[0], loss=subs[1], optim=subs[2], **top)
        except (ValueError, TypeError) as exc:
            # InvalidArgumentError is a ValueError too: report it against the file
            raise ParseError(str(exc), path=path) from exc

    def with_overrides(self, overrides: dict) -> RunConfig:
        kv = self.to_kv()
        kv.update(overrides)
        return RunConfig.from_kv(kv)

    def dumps(self) -> str:
        return format_kv(self.to_kv())


def load_config(path) -> RunConfig:
    path = Path(path)
    return RunConfig.from_kv(read_kv(path), path=path)


def save_config(path, cfg: RunConfig) -> None:
    write_kv(path, cfg.to_kv())
