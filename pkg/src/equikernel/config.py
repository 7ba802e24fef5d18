"""Flat ``key=value`` run configuration validated against a typed schema."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable

from .model import BackboneConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


def _check(pred: Callable[[Any], bool], what: str):
    def validate(v):
        if not pred(v):
            raise ValueError(what)
    return validate


_pos = _check(lambda v: v > 0, "must be positive")
_nonneg = _check(lambda v: v >= 0, "must be non-negative")
_four_pos = _check(lambda v: len(v) == 4 and min(v) >= 1, "needs four positive integers")

# key -> (parser, default, validator)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any, Callable[[Any], None] | None]] = {
    "backbone.widths": (_ints, (32, 64, 128, 256), _four_pos),
    "backbone.layers": (_ints, (1, 1, 1, 1), _four_pos),
    "backbone.strides": (_ints, (1, 2, 2, 1), _check(lambda v: len(v) == 4 and set(v) <= {1, 2},
                                                     "needs four strides of 1 or 2")),
    "backbone.parts": (int, 16, _pos),
    "backbone.embed_dim": (int, 256, _pos),
    "backbone.audit_mode": (_bool, False, None),
    "backbone.reel": (_bool, True, None),
    "backbone.roel": (_bool, True, None),
    "backbone.sel": (_bool, True, None),
    "backbone.gpool": (_choice("max", "mean"), "max", None),
    "backbone.hp_mode": (_choice("max_mean", "max"), "max_mean", None),
    "backbone.mirror_phase": (_bool, True, None),
    "roel.theta_limit_deg": (float, 40.0, _check(lambda v: 0 < v <= 90, "must lie in (0, 90]")),
    "roel.head_conv": (_choice("depthwise", "full"), "depthwise", None),
    "sel.reduction_r": (int, 4, _pos),
    "sel.branch_mode": (_choice("plain", "dilated"), "plain", None),
    "sel.identity_init": (_bool, False, None),
    "train.iterations": (int, 2000, _nonneg),
    "train.lr": (float, 0.01, _pos),
    "train.momentum": (float, 0.9, _check(lambda v: 0 <= v < 1, "must lie in [0, 1)")),
    "train.weight_decay": (float, 5e-4, _nonneg),
    "train.milestones": (_ints, (1000, 1500), _check(lambda v: list(v) == sorted(v), "must be increasing")),
    "train.gamma": (float, 0.1, _pos),
    "train.p": (int, 4, _check(lambda v: v >= 2, "needs at least 2 identities")),
    "train.k": (int, 4, _check(lambda v: v >= 2, "needs at least 2 sequences per identity")),
    "train.frames": (int, 30, _pos),
    "train.margin": (float, 0.2, _nonneg),
    "train.beta": (float, 1.0, _nonneg),
    "train.log_every": (int, 50, _pos),
    "data.identities": (int, 10, _check(lambda v: v >= 2, "needs at least 2 identities")),
    "data.seqs_per_identity": (int, 12, _pos),
    "data.train_seqs": (int, 6, _pos),
    "data.gallery_seqs": (int, 2, _pos),
    "data.frames": (int, 30, _pos),
    "data.probe_rotation_deg": (float, 20.0, _check(lambda v: 0 <= v <= 45, "must lie in [0, 45]")),
    "data.dilate_iters": (int, 1, _nonneg),
    "data.manifest": (str, "", None),
    "audit.trials": (int, 50, _pos),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]
    text: str = ""

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()[:16]

    def backbone(self, num_classes: int | None = None, **overrides) -> BackboneConfig:
        v = self.values
        cfg = BackboneConfig(
            widths=v["backbone.widths"], layers=v["backbone.layers"], strides=v["backbone.strides"],
            parts=v["backbone.parts"], theta_limit=v["roel.theta_limit_deg"], reduction=v["sel.reduction_r"],
            embed_dim=v["backbone.embed_dim"], num_classes=num_classes or v["data.identities"],
            audit_mode=v["backbone.audit_mode"], reel=v["backbone.reel"], roel=v["backbone.roel"],
            sel=v["backbone.sel"], gpool=v["backbone.gpool"], hp_mode=v["backbone.hp_mode"],
            head_conv=v["roel.head_conv"], branch_mode=v["sel.branch_mode"],
            sel_identity_init=v["sel.identity_init"], mirror_phase=v["backbone.mirror_phase"])
        return replace(cfg, **overrides) if overrides else cfg

    def render(self) -> str:
        """Canonical ``key=value`` text that parses back to the same values."""
        return "".join(f"{k}={_render(self.values[k])}\n" for k in sorted(self.values))

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        return parse_pairs({**{k: _render(v) for k, v in self.values.items()}, **pairs})


def _render(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_pairs(pairs: dict[str, str], text: str = "") -> RunConfig:
    values = {k: d for k, (_, d, _) in SCHEMA.items()}
    for key, raw in pairs.items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        parser, _, validate = SCHEMA[key]
        try:
            val = parser(raw)
            if validate is not None:
                validate(val)
        except ValueError as e:
            raise ConfigError(key, f"{e} (got {raw!r})") from None
        values[key] = val
    total = sum(values["backbone.widths"]) * (1 if values["backbone.reel"] else 2)
    if values["backbone.sel"] and total % values["sel.reduction_r"]:
        raise ConfigError("sel.reduction_r", f"must divide the tap channel sum {total}")
    if values["data.train_seqs"] + values["data.gallery_seqs"] > values["data.seqs_per_identity"]:
        raise ConfigError("data.seqs_per_identity", "too small for the train and gallery split")
    return RunConfig(values, text)


def parse_config(text: str) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(key, f"duplicate key on line {lineno}")
        pairs[key] = val
    return parse_pairs(pairs, text)


def load_config(path=None) -> RunConfig:
    if path is None:
        return parse_pairs({})
    return parse_config(Path(path).read_text(encoding="utf-8"))
