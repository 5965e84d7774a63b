"""Experiment configuration.

A run is described by one TOML (or JSON) file; individual keys can be
overridden from the command line with dotted paths, e.g.
``--set model.a=0.95``.  Example::

    seed = 7
    horizon = 500
    replications = 50
    metrics = ["mean_abs_err"]
    output_dir = "out/figure1"

    [model]
    kind = "linear_gaussian"
    a = 0.9
    q = 1.0
    r = 1.0
    x0 = 0.0

    [[filters]]
    kind = "kalman"

    [[filters]]
    kind = "bootstrap"
    n = [50, 100, 400]

    [[filters]]
    kind = "naive"
    n = [50, 100, 400]
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from uniformpf.models import (
    ModelSpec,
    make_bounded_obs_model,
    make_finite_hmm,
    make_linear_gaussian,
)

EXACT_KINDS = ("kalman", "forward", "grid")
APPROX_KINDS = ("bootstrap", "naive")
DISTANCE_METRICS = ("bl", "tv")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field_path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in errors))

    @classmethod
    def from_validation(cls, exc: ValidationError) -> "ConfigError":
        return cls([(".".join(str(p) for p in e["loc"]) or "<root>", e["msg"]) for e in exc.errors()])


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LinearGaussianModel(_Strict):
    kind: Literal["linear_gaussian"]
    a: float = 0.9
    q: float = Field(1.0, gt=0)
    r: float = Field(1.0, gt=0)
    x0: float = 0.0
    p0: float = Field(0.0, ge=0)


class FiniteHmmModel(_Strict):
    kind: Literal["finite_hmm"]
    transition: list[list[float]]
    emission: list[list[float]]
    initial: list[float]


class BoundedObsModel(_Strict):
    kind: Literal["bounded_obs"]
    a: float = 0.9
    q: float = Field(1.0, gt=0)
    x0: float = 0.0
    p0: float = Field(0.0, ge=0)
    h: Literal["tanh", "zero"] = "tanh"
    scale: float = Field(1.0, gt=0)
    sigma: float = Field(1.0, gt=0)


ModelBlock = Annotated[Union[LinearGaussianModel, FiniteHmmModel, BoundedObsModel], Field(discriminator="kind")]


class FilterBlock(_Strict):
    kind: Literal["kalman", "forward", "grid", "bootstrap", "naive"]
    n: Optional[list[int]] = None
    nodes: int = 2001
    lo: float = -10.0
    hi: float = 10.0

    @field_validator("n", mode="before")
    @classmethod
    def _listify(cls, v):
        return [v] if isinstance(v, int) else v

    @model_validator(mode="after")
    def _check_n(self):
        if self.kind in APPROX_KINDS:
            if not self.n or any(k < 1 for k in self.n):
                raise ValueError(f"{self.kind} needs a positive particle count n")
        elif self.n is not None:
            raise ValueError(f"{self.kind} is exact and takes no particle count")
        return self


class SweepBlock(_Strict):
    n_values: list[int] = [50, 200, 800, 3200]
    t_values: list[int] = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000]
    filters: list[Literal["bootstrap", "naive"]] = ["bootstrap"]


class DiagnoseBlock(_Strict):
    kind: Literal["tightness", "case_i"] = "tightness"
    n_particles: int = Field(200, ge=1)
    lyapunov: Literal["quadratic", "constant"] = "quadratic"


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    horizon: int = Field(..., ge=1)
    replications: int = Field(1, ge=1)
    metrics: list[Literal["bl", "tv", "mse", "mean_abs_err", "ess"]] = ["mean_abs_err"]
    test_function: Literal["identity", "tanh"] = "identity"
    lyapunov: Optional[Literal["quadratic"]] = None
    bl_bins: int = Field(200, ge=1)
    output_dir: str = "out"
    threads: int = Field(1, ge=1)
    model: ModelBlock
    filters: list[FilterBlock] = Field(..., min_length=1)
    sweep: Optional[SweepBlock] = None
    diagnose: Optional[DiagnoseBlock] = None

    @model_validator(mode="after")
    def _consistency(self):
        exact = [f for f in self.filters if f.kind in EXACT_KINDS]
        approx = [f for f in self.filters if f.kind in APPROX_KINDS]
        needs_ref = any(m in self.metrics for m in ("bl", "tv", "mse", "mean_abs_err"))
        if needs_ref and not exact:
            raise ValueError("distance metrics need at least one exact filter")
        finite = self.model.kind == "finite_hmm"
        for f in exact:
            if f.kind == "forward" and not finite:
                raise ValueError("forward filter needs a finite_hmm model")
            if f.kind in ("kalman", "grid") and finite:
                raise ValueError(f"{f.kind} filter needs a continuous model")
            if f.kind == "kalman" and self.model.kind != "linear_gaussian":
                raise ValueError("kalman filter needs a linear_gaussian model")
        if exact and any(m in self.metrics for m in DISTANCE_METRICS) and exact[0].kind == "kalman":
            raise ValueError("bl/tv need an atomic reference (forward or grid) listed first")
        kinds = [f.kind for f in self.filters]
        if len(set(kinds)) != len(kinds):
            raise ValueError("each filter kind may appear once")
        ns = {tuple(f.n) for f in approx}
        if len(ns) > 1:
            raise ValueError("all approximate filters must share the same particle counts")
        return self

    @property
    def particle_counts(self) -> list[int]:
        for f in self.filters:
            if f.kind in APPROX_KINDS:
                return list(f.n)
        return []

    @property
    def reference(self) -> Optional[FilterBlock]:
        for f in self.filters:
            if f.kind in EXACT_KINDS:
                return f
        return None


def build_model(block) -> ModelSpec:
    if block.kind == "linear_gaussian":
        return make_linear_gaussian(block.a, block.q, block.r, block.x0, block.p0)
    if block.kind == "finite_hmm":
        return make_finite_hmm(block.transition, block.emission, block.initial)
    if block.kind == "bounded_obs":
        base = make_linear_gaussian(block.a, block.q, 1.0, block.x0, block.p0)
        c = block.scale
        if block.h == "tanh":
            def h(x):
                return c * np.tanh(x)
            sup = c
        else:
            def h(x):
                return np.zeros_like(x, dtype=float)
            sup = 0.0
        return make_bounded_obs_model(base, h, [[block.sigma]], sup)
    raise ConfigError([("model.kind", f"unknown model kind {block.kind!r}")])


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.path=value`` overrides; values are parsed as JSON when possible."""
    tree = json.loads(json.dumps(tree))
    for item in overrides:
        if "=" not in item:
            raise ConfigError([(item, "override must look like key=value")])
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = tree
        for k in keys[:-1]:
            if isinstance(node, list):
                node = node[int(k)]
            else:
                node = node.setdefault(k, {})
        last = keys[-1]
        if isinstance(node, list):
            node[int(last)] = _parse_scalar(value)
        else:
            node[last] = _parse_scalar(value)
    return tree


def read_tree(path) -> dict:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".json":
        return json.loads(data)
    return tomllib.loads(data.decode("utf-8"))


def load_config(path=None, overrides: Optional[list[str]] = None, tree: Optional[dict] = None) -> ExperimentConfig:
    """Load, override and validate a configuration; raises :class:`ConfigError`."""
    try:
        raw = tree if tree is not None else read_tree(path)
    except (OSError, tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError([("<file>", str(exc))]) from exc
    if overrides:
        raw = apply_overrides(raw, overrides)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError.from_validation(exc) from None
