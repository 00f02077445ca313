"""Bayesian optimization loop with crash-aware objective and unknown constraints.

Four modelling cases are supported:

1. self-constrained objective (GPCR objective, no constraints),
2. binary constraints folded into the GPCR objective,
3. level-set constraints on a plain-GP objective,
4. GPCR objective plus level-set constraints (binary ones optional).

Observations list the level-set constraints first, then the binary ones.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .acquisition import (
    AcquisitionConfig,
    alpha_mesco,
    candidate_points,
    feasible_mode,
    maximize_acquisition,
    probability_product,
    sample_constrained_min,
)
from .gpcr import NO_THRESHOLD, GPCRModel, HybridDataset, ThresholdPrior, estimate_threshold_map, fit, log_prob_stable, predict
from .kernels import KernelSpec, NoiseSpec

log = logging.getLogger(__name__)


class Label(enum.Enum):
    UNSTABLE = "unstable"
    VIOLATED = "violated"
    SATISFIED = "satisfied"


@dataclass(frozen=True)
class CoupledObservation:
    """One experiment: objective value or UNSTABLE, and one entry per constraint.

    Level-set constraints report a value or VIOLATED; binary constraints report
    SATISFIED or VIOLATED.
    """

    objective: float | Label
    constraints: tuple = ()

    @property
    def objective_stable(self) -> bool:
        return not isinstance(self.objective, Label)


STREAMS = ("init", "acquisition", "samples", "noise", "best_guess")


class Case(enum.IntEnum):
    SELF_CONSTRAINED = 1
    BINARY_ONLY = 2
    LEVEL_SET_ONLY = 3
    MIXED = 4


@dataclass(frozen=True)
class FunctionSpec:
    """Kernel, noise and (for GPCR-modelled functions) threshold hyperprior."""

    kernel: KernelSpec
    noise: NoiseSpec
    prior: ThresholdPrior | None = None


@dataclass(frozen=True)
class CaseConfig:
    case: Case
    objective: FunctionSpec
    level_sets: tuple[FunctionSpec, ...] = ()
    n_binary: int = 0

    def __post_init__(self):
        case = Case(self.case)
        object.__setattr__(self, "case", case)
        object.__setattr__(self, "level_sets", tuple(self.level_sets))
        m_l = len(self.level_sets)
        if case is Case.SELF_CONSTRAINED and (m_l or self.n_binary):
            raise ValueError("a self-constrained case has no explicit constraints")
        if case is Case.BINARY_ONLY and (m_l or self.n_binary < 1):
            raise ValueError("the binary-only case needs n_binary >= 1 and no level-set constraints")
        if case is Case.LEVEL_SET_ONLY and (m_l < 1 or self.n_binary):
            raise ValueError("the level-set case needs at least one level-set constraint and no binary ones")
        if case is Case.MIXED and m_l < 1:
            raise ValueError("the mixed case needs at least one level-set constraint")
        if self.objective_is_gpcr and self.objective.prior is None:
            raise ValueError("a GPCR objective needs a threshold prior")
        for spec in self.level_sets:
            if spec.prior is None:
                raise ValueError("every level-set constraint needs a threshold prior")
        dims = {self.objective.kernel.dim} | {s.kernel.dim for s in self.level_sets}
        if len(dims) != 1:
            raise ValueError(f"kernels disagree on the input dimension: {sorted(dims)}")

    @property
    def objective_is_gpcr(self) -> bool:
        return self.case is not Case.LEVEL_SET_ONLY

    @property
    def n_level_sets(self) -> int:
        return len(self.level_sets)

    @property
    def n_constraints(self) -> int:
        return self.n_level_sets + self.n_binary

    @property
    def dim(self) -> int:
        return self.objective.kernel.dim


@dataclass
class IterationRecord:
    iteration: int
    x: np.ndarray
    observation: CoupledObservation
    threshold: float | None
    constraint_thresholds: list[float]
    x_bg: np.ndarray
    y_bg: float | None
    mode_a: bool
    n_fallback: int


@dataclass
class BOState:
    config: CaseConfig
    objective_data: HybridDataset
    constraint_data: list[HybridDataset]
    initial_x: np.ndarray | None = None
    initial_observation: CoupledObservation | None = None
    records: list[IterationRecord] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    final_observation: CoupledObservation | None = None

    @property
    def iteration(self) -> int:
        return len(self.records)

    @property
    def threshold_trace(self) -> list[float | None]:
        return [r.threshold for r in self.records]

    @property
    def constraint_threshold_traces(self) -> list[list[float]]:
        return [[r.constraint_thresholds[j] for r in self.records] for j in range(self.config.n_level_sets)]

    @property
    def best_guess_trace(self) -> list[np.ndarray]:
        return [r.x_bg for r in self.records]

    @property
    def y_bg_trace(self) -> list[float | None]:
        return [r.y_bg for r in self.records]

    @property
    def evaluated(self) -> list[tuple[np.ndarray, CoupledObservation]]:
        out = [] if self.initial_x is None else [(self.initial_x, self.initial_observation)]
        return out + [(r.x, r.observation) for r in self.records]


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed."""
    root = np.random.SeedSequence(int(seed))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, root.spawn(len(STREAMS)))}


def _check_observation(obs: CoupledObservation, cfg: CaseConfig):
    if len(obs.constraints) != cfg.n_constraints:
        raise ValueError(f"observation has {len(obs.constraints)} constraint entries, expected {cfg.n_constraints}")
    if isinstance(obs.objective, Label) and obs.objective is not Label.UNSTABLE:
        raise ValueError(f"objective label must be {Label.UNSTABLE.value!r}, got {obs.objective.value!r}")
    if obs.objective is Label.UNSTABLE and not cfg.objective_is_gpcr:
        raise ValueError("a plain-GP objective cannot absorb an unstable label")
    for j, entry in enumerate(obs.constraints):
        binary = j >= cfg.n_level_sets
        if binary and entry not in (Label.SATISFIED, Label.VIOLATED):
            raise ValueError(f"binary constraint {j} needs 'satisfied' or 'violated', got {entry!r}")
        if not binary and not (entry is Label.VIOLATED or (not isinstance(entry, Label) and math.isfinite(float(entry)))):
            raise ValueError(f"level-set constraint {j} needs a number or 'violated', got {entry!r}")
    if not isinstance(obs.objective, Label) and not math.isfinite(float(obs.objective)):
        raise ValueError(f"objective value must be finite, got {obs.objective!r}")


def absorb_binary(
    obs: CoupledObservation, x, cfg: CaseConfig, objective_data: HybridDataset, constraint_data: Sequence[HybridDataset]
) -> tuple[HybridDataset, list[HybridDataset]]:
    """Add one coupled observation to all datasets.

    Objective instability or any violated binary constraint makes x an
    unstable point of the objective; level-set constraints always record
    their own value or violation label.
    """
    _check_observation(obs, cfg)
    binary = obs.constraints[cfg.n_level_sets :]
    if obs.objective is Label.UNSTABLE or any(b is Label.VIOLATED for b in binary):
        objective_data = objective_data.add_unstable(x)
    else:
        objective_data = objective_data.add_stable(x, float(obs.objective))
    updated = []
    for data, entry in zip(constraint_data, obs.constraints[: cfg.n_level_sets]):
        updated.append(data.add_unstable(x) if entry is Label.VIOLATED else data.add_stable(x, float(entry)))
    return objective_data, updated


def update_thresholds(state: BOState) -> tuple[float | None, list[float]]:
    """MAP thresholds; 0 for a GPCR model that has no stable data yet."""
    cfg = state.config

    def one(data: HybridDataset, spec: FunctionSpec) -> float:
        if data.n_stable == 0:
            return 0.0
        return estimate_threshold_map(data, spec.kernel, spec.noise, spec.prior)

    c_obj = one(state.objective_data, cfg.objective) if cfg.objective_is_gpcr else None
    c_con = [one(d, s) for d, s in zip(state.constraint_data, cfg.level_sets)]
    return c_obj, c_con


def fit_models(state: BOState, c_obj: float | None, c_con: Sequence[float]) -> tuple[GPCRModel, list[GPCRModel]]:
    cfg = state.config
    obj = fit(state.objective_data, cfg.objective.kernel, cfg.objective.noise, NO_THRESHOLD if c_obj is None else c_obj)
    cons = [fit(d, s.kernel, s.noise, c) for d, s, c in zip(state.constraint_data, cfg.level_sets, c_con)]
    return obj, cons


def best_guess(objective: GPCRModel, constraints: Sequence[GPCRModel], delta: float, candidates) -> np.ndarray:
    """Posterior-mean minimizer among candidates meeting the joint confidence 1 - delta.

    Falls back to the candidate with the largest probability product when no
    candidate qualifies (compared in log space, where tiny products still differ).
    """
    candidates = np.atleast_2d(candidates)
    prob = probability_product(constraints, candidates)
    ok = prob >= 1.0 - delta
    if not np.any(ok):
        log_prob = sum((log_prob_stable(m, candidates) for m in constraints), np.zeros(candidates.shape[0]))
        return candidates[int(np.argmax(log_prob))].copy()
    mean = predict(objective, candidates[ok]).mean
    return candidates[ok][int(np.argmin(mean))].copy()


def _note_convergence(state: BOState, models: Sequence[GPCRModel], where: str):
    for k, m in enumerate(models):
        if not m.converged:
            msg = f"iteration {state.iteration + 1}: EP did not converge for {where} model {k}"
            log.warning(msg)
            state.notes.append(msg)


def initial_state(cfg: CaseConfig) -> BOState:
    return BOState(cfg, HybridDataset.empty(cfg.dim), [HybridDataset.empty(cfg.dim) for _ in cfg.level_sets])


def observe(state: BOState, x, obs: CoupledObservation):
    state.objective_data, state.constraint_data = absorb_binary(obs, x, state.config, state.objective_data, state.constraint_data)


def suggest(state: BOState, acq: AcquisitionConfig, streams: dict[str, np.random.Generator]):
    """Threshold update, model fit and acquisition maximization for the next query.

    Returns (x_next, thresholds, constraint thresholds, mode_a, samples).
    """
    cfg = state.config
    c_obj, c_con = update_thresholds(state)
    obj, cons = fit_models(state, c_obj, c_con)
    _note_convergence(state, [obj, *cons], "acquisition")
    # evaluated inputs join the quasi-random grid: they are where confidence is highest
    grid = np.vstack([candidate_points(cfg.dim, acq.candidate_grid, streams["acquisition"]), state.objective_data.inputs])
    samples = sample_constrained_min(obj, cons, acq, streams["samples"], objective_threshold=c_obj)
    mode_a = feasible_mode(cons, grid, acq.delta)
    x_next, _ = maximize_acquisition(lambda X: alpha_mesco(X, obj, cons, samples, mode_a), cfg.dim, acq, grid=grid)
    return x_next, c_obj, c_con, mode_a, samples


def current_best_guess(state: BOState, c_obj, c_con, acq: AcquisitionConfig, rng: np.random.Generator) -> np.ndarray:
    obj, cons = fit_models(state, c_obj, c_con)
    grid = candidate_points(state.config.dim, acq.candidate_grid, rng)
    candidates = np.vstack([grid, state.objective_data.stable_x])
    return best_guess(obj, cons, acq.delta, candidates)


def run(
    cfg: CaseConfig,
    oracle: Callable[[np.ndarray], CoupledObservation],
    T: int,
    acq: AcquisitionConfig | None = None,
    seed: int = 0,
    streams: dict[str, np.random.Generator] | None = None,
    bg_evaluator: Callable[[np.ndarray], float] | None = None,
    final_evaluation: bool = False,
) -> BOState:
    """Run T iterations after one uniformly random initial experiment.

    ``bg_evaluator`` (if given) measures the best guess after every
    iteration, e.g. for regret curves; ``final_evaluation`` additionally sends
    the last best guess to the oracle. An oracle exception stops the run and
    is recorded in ``state.errors``.
    """
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    acq = acq or AcquisitionConfig()
    streams = streams or make_streams(seed)
    state = initial_state(cfg)
    x0 = streams["init"].random(cfg.dim)
    try:
        obs0 = oracle(x0)
        observe(state, x0, obs0)
    except Exception as exc:  # noqa: BLE001 - oracle failures end the run, not the process
        state.errors.append(f"initial experiment failed: {exc}")
        return state
    state.initial_x, state.initial_observation = x0, obs0
    for t in range(1, T + 1):
        x_next, c_obj, c_con, mode_a, samples = suggest(state, acq, streams)
        try:
            obs = oracle(x_next)
            observe(state, x_next, obs)
        except Exception as exc:  # noqa: BLE001
            state.errors.append(f"iteration {t}: experiment failed: {exc}")
            return state
        x_bg = current_best_guess(state, c_obj, c_con, acq, streams["best_guess"])
        y_bg = bg_evaluator(x_bg) if bg_evaluator is not None else None
        state.records.append(
            IterationRecord(t, x_next, obs, c_obj, list(c_con), x_bg, y_bg, mode_a, int(samples.fallback.sum()))
        )
    if final_evaluation and state.records:
        try:
            state.final_observation = oracle(state.records[-1].x_bg)
        except Exception as exc:  # noqa: BLE001
            state.errors.append(f"final best-guess evaluation failed: {exc}")
    return state
