"""Run and generator configuration as flat key = value text with sections.

The text format is diff-friendly for experiment tracking; round trips are
exact (parse(print(cfg)) == cfg).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .encoder import BackboneConfig
from .losses import LossWeights, Temperatures

VARIANTS = ("cp", "dp", "lpi-m", "lpi-p")


@dataclass
class VariantFlags:
    prompt_type: str = "dp"   # "dp" factored, "cp" dense
    hpa: bool = False
    cpf: bool = False
    cpa: bool = False

    @classmethod
    def preset(cls, name: str) -> "VariantFlags":
        if name == "cp":
            return cls(prompt_type="cp")
        if name == "dp":
            return cls(prompt_type="dp")
        if name == "lpi-m":
            return cls(prompt_type="dp", hpa=True, cpa=True)
        if name == "lpi-p":
            return cls(prompt_type="dp", hpa=True, cpa=True, cpf=True)
        raise ValueError(f"unknown variant {name!r}, expected one of {VARIANTS}")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: VariantFlags = field(default_factory=VariantFlags)
    weights: LossWeights = field(default_factory=LossWeights)
    temps: Temperatures = field(default_factory=Temperatures)
    prompt_rank: int = 4
    interaction_rank: int = 4
    lambda_v: float = 0.9
    lambda_l: float = 0.9
    threshold: float = 0.4
    epochs: int = 30
    lr: float = 0.02
    min_lr: float = 0.0
    batch_size: int = 32
    seed: int = 0
    pretrain_steps: int = 500
    pretrain_lr: float = 0.003
    centroids: int = 5
    gallery_scope: str = "per-task"     # or "union"
    identity_mode: str = "predicted"    # or "oracle"

    def validate(self) -> None:
        if self.variant.prompt_type not in ("cp", "dp"):
            raise ValueError(f"prompt_type must be cp or dp, got {self.variant.prompt_type!r}")
        if self.gallery_scope not in ("per-task", "union"):
            raise ValueError(f"gallery_scope must be per-task or union, got {self.gallery_scope!r}")
        if self.identity_mode not in ("oracle", "predicted"):
            raise ValueError(f"identity_mode must be oracle or predicted, got {self.identity_mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")


_SECTIONS = {
    "backbone": ("backbone", BackboneConfig),
    "variant": ("variant", VariantFlags),
    "weights": ("weights", LossWeights),
    "temperatures": ("temps", Temperatures),
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, typ):
    if typ is bool:
        if raw not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw == "true"
    return typ(raw)


def print_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for section, (attr, _) in _SECTIONS.items():
        out.write(f"[{section}]\n")
        sub = getattr(cfg, attr)
        for f in fields(sub):
            out.write(f"{f.name} = {_fmt(getattr(sub, f.name))}\n")
        out.write("\n")
    out.write("[run]\n")
    for f in fields(cfg):
        if f.name in [a for a, _ in _SECTIONS.values()]:
            continue
        out.write(f"{f.name} = {_fmt(getattr(cfg, f.name))}\n")
    return out.getvalue()


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    cfg = RunConfig()
    for section, (attr, cls) in _SECTIONS.items():
        if not cp.has_section(section):
            continue
        kwargs = {}
        valid = {f.name: f.type for f in fields(cls)}
        types = {f.name: _field_type(cls, f.name) for f in fields(cls)}
        for key, raw in cp.items(section):
            if key not in valid:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            kwargs[key] = _parse(raw, types[key])
        setattr(cfg, attr, cls(**kwargs))
    if cp.has_section("run"):
        nested = {a for a, _ in _SECTIONS.values()}
        types = {f.name: _field_type(RunConfig, f.name)
                 for f in fields(RunConfig) if f.name not in nested}
        for key, raw in cp.items("run"):
            if key not in types:
                raise ValueError(f"unknown key {key!r} in section [run]")
            setattr(cfg, key, _parse(raw, types[key]))
    cfg.validate()
    return cfg


def _field_type(cls, name: str):
    for f in fields(cls):
        if f.name == name:
            t = f.type
            if isinstance(t, str):
                return {"int": int, "float": float, "bool": bool, "str": str}[t]
            return t
    raise KeyError(name)


def apply_variant(cfg: RunConfig, name: str) -> RunConfig:
    cfg = dataclasses.replace(cfg, variant=VariantFlags.preset(name))
    return cfg
