"""Run configuration: a YAML file validated into RunConfig, plus builders
turning its blocks into grids, paths, measures, functionals and problems."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .forward import DiffusionCoeffs, gaussian_table
from .funcalc.corpus import CORPUS, corpus_functional
from .funcalc.dsl import (FrozenEval, FunctionalSpec, MeasureComposite, MeasureEval, MeasureIntegral,
                          PathEval, RunningIntegral)
from .funcalc.fd import FdConfig
from .funcalc.smooth import Affine, Polynomial, map_from_config
from .pathspace import DiscretePath, ParticleMeasure, TimeGrid

LEAF_KINDS = ("path-eval", "running-integral", "measure-eval", "measure-integral",
              "measure-composite", "frozen-eval")
SEED_MAX = 2 ** 64 - 1


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridCfg(_Block):
    T: float = Field(1.0, gt=0)
    M: int = Field(100, ge=1, le=100_000)


class McCfg(_Block):
    N: int = Field(10_000, ge=2, le=10_000_000)
    seed: Optional[int] = Field(None, ge=0, le=SEED_MAX)
    threads: int = Field(1, ge=1, le=512)


class FdCfg(_Block):
    h1: Optional[float] = Field(None, gt=0)
    h2: Optional[float] = Field(None, gt=0)
    h_t: Optional[float] = Field(None, gt=0)
    lift_eps: Optional[float] = Field(None, gt=0)
    lift_eps2: Optional[float] = Field(None, gt=0)
    richardson: bool = True

    def build(self) -> FdConfig:
        return FdConfig(**self.model_dump())


class PicardCfg(_Block):
    tol: float = Field(1e-4, gt=0)
    max_iter: int = Field(50, ge=1, le=10_000)


class KernelCfg(_Block):
    t0: float
    eps: float = Field(0.0, ge=0)


class LeafCfg(_Block):
    kind: Literal[LEAF_KINDS]
    map: Optional[dict] = None
    f4: Optional[dict] = None
    f5: Optional[dict] = None
    t0: Optional[float] = None
    kernel: Optional[KernelCfg] = None

    @model_validator(mode="after")
    def _fields(self):
        if self.kind == "measure-composite":
            if self.f4 is None or self.f5 is None:
                raise ValueError("measure-composite needs f4 and f5")
        elif self.map is None:
            raise ValueError(f"{self.kind} needs a map")
        if self.kind == "frozen-eval" and self.t0 is None:
            raise ValueError("frozen-eval needs t0")
        return self


class FunctionalCfg(_Block):
    """Either a named functional or leaves plus an optional combiner
    (default: the sum of the leaves)."""
    name: Optional[str] = None
    leaves: list[LeafCfg] = Field(default_factory=list)
    combiner: Optional[dict] = None

    @model_validator(mode="after")
    def _one_form(self):
        if (self.name is None) == (not self.leaves):
            raise ValueError("give exactly one of name or leaves")
        return self


class GeneratorCfg(_Block):
    phi: Optional[dict] = None
    b: Optional[list[float]] = None
    c_nu: float = 0.0
    stat: Literal["mean", "second_moment"] = "mean"
    source: Optional[FunctionalCfg] = None
    const: float = 0.0


class CoeffsCfg(_Block):
    b1: Union[float, list[float]] = 0.0
    sigma1: Union[float, list[list[float]]] = 1.0
    b2: Union[float, list[float]] = 0.0
    sigma2: Union[float, list[list[float]]] = 1.0
    d: int = Field(1, ge=1, le=16)


class ProblemCfg(_Block):
    preset: Literal["general", "state-dependent", "ppde", "measure-only", "path-state-mixed"] = "general"
    terminal: FunctionalCfg = Field(default_factory=lambda: FunctionalCfg(name="omega(T)"))
    generator: GeneratorCfg = Field(default_factory=GeneratorCfg)
    coeffs: CoeffsCfg = Field(default_factory=CoeffsCfg)
    degree: int = Field(2, ge=1, le=6)


class LinearMfCfg(_Block):
    """dY = -(alpha Y + g E[Y] + h) dr + Z dB, Y_T = xi."""
    alpha: float = 0.0
    g: float = 0.0
    h: float = 0.0
    xi: float = 1.0


class PathCfg(_Block):
    kind: Literal["linear", "identity", "constant", "values", "brownian"] = "linear"
    start: float = 0.0
    end: float = 0.0
    value: float = 0.0
    values: Optional[list[float]] = None
    seed: Optional[int] = Field(None, ge=0, le=SEED_MAX)


class MeasureCfg(_Block):
    """brownian: Brownian particles from x0; constant: flat paths at `values`;
    ramp: x0 + spread * xi_i + slope * s with xi_i standard normal."""
    kind: Literal["brownian", "constant", "ramp"] = "brownian"
    particles: int = Field(50, ge=1, le=100_000)
    x0: float = 0.0
    slope: float = 1.0
    spread: float = 1.0
    values: Optional[list[float]] = None
    seed: Optional[int] = Field(None, ge=0, le=SEED_MAX)


class PointCfg(_Block):
    t: list[float] = Field(default_factory=lambda: [0.5])
    gamma: PathCfg = Field(default_factory=lambda: PathCfg(kind="linear", start=0.0, end=0.7))
    mu: Optional[MeasureCfg] = None


class SweepCfg(_Block):
    M: list[int] = Field(default_factory=list)
    N: list[int] = Field(default_factory=list)
    eps: list[float] = Field(default_factory=list)
    budget: int = Field(64, ge=1)

    @field_validator("M", "N")
    @classmethod
    def _positive(cls, v):
        if any(x < 1 for x in v):
            raise ValueError("axis values must be positive")
        return v


class DerivcheckCfg(_Block):
    functionals: list[Literal[CORPUS]] = Field(default_factory=lambda: list(CORPUS))
    probes: int = Field(100, ge=1)
    particles: int = Field(10, ge=1)


class ItoCfg(_Block):
    functional: FunctionalCfg = Field(default_factory=lambda: FunctionalCfg(name="square"))
    t: float = 0.0
    s: Optional[float] = None
    v: Optional[float] = None
    N_prime: Optional[int] = Field(None, ge=1)


class MollifyCfg(_Block):
    case: Literal["delay-path", "delay-measure", "delay-mixed", "delay-source"] = "delay-path"
    a: float = 1.0
    b: float = 1.0
    t0: float = 0.5
    t1: float = 0.3
    t2: float = 0.6
    c: tuple[float, float] = (1.0, 1.0)
    eps: list[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    t: list[float] = Field(default_factory=lambda: [0.0, 0.25, 0.75, 1.0])


class MasterCfg(_Block):
    """closed_form selects a library case as the field; otherwise the
    decoupling field of the problem block is used."""
    closed_form: Optional[Literal["delay-path", "delay-measure", "delay-mixed", "delay-source", "heat_quadratic"]] = None
    eps: float = Field(0.0, ge=0)
    derivatives: bool = False
    particle: int = Field(0, ge=0)
    residual: bool = False
    residual_mode: Literal["fd", "analytic"] = "fd"


class CompareCfg(_Block):
    terminal2: Optional[FunctionalCfg] = None
    generator2: GeneratorCfg = Field(default_factory=GeneratorCfg)


class FlowCfg(_Block):
    s: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75])
    n_paths: int = Field(10, ge=1)


class ConvergenceCfg(_Block):
    target: Literal["ito", "bsde"] = "ito"
    slope_axis: Literal["M", "N"] = "M"
    slope_band: Optional[tuple[float, float]] = None


class ExpectCfg(_Block):
    """Reference values for solve-bsde / master-eval, one per point.t entry."""
    values: list[float] = Field(default_factory=list)
    rel_tol: Optional[float] = Field(None, gt=0)
    n_se: float = Field(3.0, gt=0)


class RunConfig(_Block):
    experiment: str = "run"
    grid: GridCfg = Field(default_factory=GridCfg)
    mc: McCfg = Field(default_factory=McCfg)
    fd: FdCfg = Field(default_factory=FdCfg)
    picard: PicardCfg = Field(default_factory=PicardCfg)
    problem: ProblemCfg = Field(default_factory=ProblemCfg)
    linear_mf: Optional[LinearMfCfg] = None
    point: PointCfg = Field(default_factory=PointCfg)
    sweep: SweepCfg = Field(default_factory=SweepCfg)
    derivcheck: DerivcheckCfg = Field(default_factory=DerivcheckCfg)
    ito: ItoCfg = Field(default_factory=ItoCfg)
    mollify: MollifyCfg = Field(default_factory=MollifyCfg)
    master: MasterCfg = Field(default_factory=MasterCfg)
    compare: CompareCfg = Field(default_factory=CompareCfg)
    flow: FlowCfg = Field(default_factory=FlowCfg)
    convergence: ConvergenceCfg = Field(default_factory=ConvergenceCfg)
    expect: ExpectCfg = Field(default_factory=ExpectCfg)
    out: Optional[str] = None

    @property
    def seed(self) -> int:
        if self.mc.seed is None:
            raise ConfigError("mc.seed", "a seed is mandatory (set mc.seed or pass --seed)")
        return self.mc.seed


def _dotted(loc) -> str:
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def parse_config(data: Any) -> RunConfig:
    try:
        return RunConfig.model_validate(data if data is not None else {})
    except ValidationError as exc:
        err = exc.errors()[0]
        # drop the union/literal branch tags pydantic appends to the location
        loc = [p for p in err["loc"] if not (isinstance(p, str) and ("[" in p or p in ("float", "list")))]
        raise ConfigError(_dotted(loc), err["msg"]) from None


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return parse_config({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError("<file>", f"config file {path} not found")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    return parse_config(data)


# --- builders ---------------------------------------------------------------------

def build_grid(cfg: GridCfg, M: Optional[int] = None) -> TimeGrid:
    return TimeGrid(cfg.T, M or cfg.M)


def build_path(cfg: PathCfg, grid: TimeGrid, seed: int, where: str = "point.gamma") -> DiscretePath:
    t = grid.nodes
    if cfg.kind == "linear":
        return DiscretePath(grid, (cfg.start + (cfg.end - cfg.start) * t / grid.T)[:, None])
    if cfg.kind == "identity":
        return DiscretePath(grid, t[:, None])
    if cfg.kind == "constant":
        return DiscretePath.constant(grid, [cfg.value])
    if cfg.kind == "values":
        if cfg.values is None or len(cfg.values) != grid.M + 1:
            raise ConfigError(f"{where}.values", f"need {grid.M + 1} values for M={grid.M}")
        return DiscretePath(grid, np.asarray(cfg.values, dtype=float)[:, None])
    xi = gaussian_table(cfg.seed if cfg.seed is not None else seed, "config-gamma", [0], grid.M, 1)[0]
    return DiscretePath(grid, np.concatenate([[[cfg.start]], cfg.start + np.sqrt(grid.dt) * np.cumsum(xi, 0)]))


def build_measure(cfg: Optional[MeasureCfg], grid: TimeGrid, seed: int,
                  where: str = "point.mu") -> Optional[ParticleMeasure]:
    if cfg is None:
        return None
    if cfg.kind == "constant":
        vals = cfg.values if cfg.values is not None else [cfg.x0] * cfg.particles
        arr = np.repeat(np.asarray(vals, dtype=float)[:, None, None], grid.M + 1, axis=1)
        return ParticleMeasure(grid, arr)
    xi = gaussian_table(cfg.seed if cfg.seed is not None else seed, "config-mu",
                        np.arange(cfg.particles), grid.M, 1)
    if cfg.kind == "ramp":
        s = grid.nodes[None, :, None]
        return ParticleMeasure(grid, cfg.x0 + cfg.spread * xi[:, :1, :] + cfg.slope * s)
    inc = np.sqrt(grid.dt) * np.cumsum(xi, axis=1)
    arr = cfg.x0 + np.concatenate([np.zeros((cfg.particles, 1, 1)), inc], axis=1)
    return ParticleMeasure(grid, arr)


def _map(cfg: dict, where: str):
    return map_from_config(cfg, where)


def _kernel(cfg: Optional[KernelCfg], T: float, where: str):
    if cfg is None:
        return None
    from .master.mollifier import Mollifier, PointMass
    if not 0 < cfg.t0 < T:
        raise ConfigError(f"{where}.t0", f"kernel centre must lie in (0, {T})")
    return PointMass(cfg.t0) if cfg.eps == 0 else Mollifier(cfg.t0, cfg.eps, T)


def build_leaf(cfg: LeafCfg, T: float, where: str):
    if cfg.kind == "path-eval":
        return PathEval(_map(cfg.map, f"{where}.map"))
    if cfg.kind == "frozen-eval":
        return FrozenEval(_map(cfg.map, f"{where}.map"), cfg.t0)
    if cfg.kind == "running-integral":
        return RunningIntegral(_map(cfg.map, f"{where}.map"), _kernel(cfg.kernel, T, f"{where}.kernel"))
    if cfg.kind == "measure-eval":
        return MeasureEval(_map(cfg.map, f"{where}.map"))
    if cfg.kind == "measure-integral":
        return MeasureIntegral(_map(cfg.map, f"{where}.map"), _kernel(cfg.kernel, T, f"{where}.kernel"))
    return MeasureComposite(_map(cfg.f4, f"{where}.f4"), _map(cfg.f5, f"{where}.f5"))


NAMED = ("omega(T)", "square", "mean(T)", "omega(T)+mean(T)") + CORPUS


def build_functional(cfg: FunctionalCfg, T: float, seed: int, where: str) -> FunctionalSpec:
    """Named functionals: omega(T) and square (omega(t)^2) on the path,
    mean(T) = E^mu[W(t)], their sum, and the random derivative-corpus
    instances drawn from the run seed."""
    if cfg.name is not None:
        ident = PathEval(Affine([1.0]))
        if cfg.name == "omega(T)":
            return FunctionalSpec(Affine([1.0]), [ident], name="omega(T)")
        if cfg.name == "square":
            return FunctionalSpec(Affine([1.0]), [PathEval(Polynomial([(1.0, [2])]))], name="square")
        if cfg.name == "mean(T)":
            return FunctionalSpec(Affine([1.0]), [MeasureEval(Affine([1.0]))], name="mean(T)")
        if cfg.name == "omega(T)+mean(T)":
            return FunctionalSpec(Affine([1.0, 1.0]), [ident, MeasureEval(Affine([1.0]))], name=cfg.name)
        if cfg.name in CORPUS:
            return corpus_functional(cfg.name, np.random.default_rng([seed, CORPUS.index(cfg.name)]))
        raise ConfigError(f"{where}.name", f"unknown functional {cfg.name!r}; choose from {list(NAMED)}")
    leaves = [build_leaf(leaf, T, f"{where}.leaves[{i}]") for i, leaf in enumerate(cfg.leaves)]
    comb = Affine(np.ones(len(leaves))) if cfg.combiner is None else _map(cfg.combiner, f"{where}.combiner")
    if comb.dim != len(leaves):
        raise ConfigError(f"{where}.combiner", f"combiner takes {comb.dim} arguments, there are {len(leaves)} leaves")
    return FunctionalSpec(comb, leaves, name=where)


def build_generator(cfg: GeneratorCfg, T: float, seed: int, where: str):
    from .bsde.generator import SeparableGenerator
    phi = None if cfg.phi is None else _map(cfg.phi, f"{where}.phi")
    src = None if cfg.source is None else build_functional(cfg.source, T, seed, f"{where}.source")
    return SeparableGenerator(phi=phi, b=cfg.b, c_nu=cfg.c_nu, stat=cfg.stat, source=src, const=cfg.const)


def build_coeffs(cfg: CoeffsCfg) -> DiffusionCoeffs:
    def arr(x):
        return x if isinstance(x, float) else np.asarray(x, dtype=float)
    return DiffusionCoeffs(arr(cfg.b1), arr(cfg.sigma1), arr(cfg.b2), arr(cfg.sigma2), cfg.d)


def build_problem(cfg: RunConfig, grid: TimeGrid, N: Optional[int] = None, seed: Optional[int] = None,
                  terminal: Optional[FunctionalCfg] = None, generator: Optional[GeneratorCfg] = None,
                  where: str = "problem"):
    from .bsde.solvers import BsdeProblem
    from .master.field import MasterProblem
    p = cfg.problem
    seed = cfg.seed if seed is None else seed
    term = build_functional(terminal or p.terminal, grid.T, seed,
                            "compare.terminal2" if terminal else f"{where}.terminal")
    gen = build_generator(generator or p.generator, grid.T, seed,
                          "compare.generator2" if generator else f"{where}.generator")
    bsde = BsdeProblem(term, grid, gen, build_coeffs(p.coeffs), N=N or cfg.mc.N, seed=seed, degree=p.degree,
                       law_tol=cfg.picard.tol, max_iter=cfg.picard.max_iter)
    try:
        return MasterProblem(bsde, p.preset)
    except ValueError as exc:
        raise ConfigError(f"{where}.preset", str(exc)) from None
