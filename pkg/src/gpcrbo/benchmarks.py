"""Synthetic constrained problems, ground-truth oracles and run statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .gpcr import HybridDataset, ThresholdPrior
from .kernels import KernelSpec, NoiseSpec
from .loop import Case, CaseConfig, CoupledObservation, FunctionSpec, Label


@dataclass(frozen=True)
class ConstraintSpec:
    """A black-box constraint g(x) <= threshold.

    ``fn`` returns NaN where the constraint is violated and has no value.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    threshold: float
    binary: bool = False


@dataclass
class SyntheticProblem:
    name: str
    dim: int
    objective: Callable[[np.ndarray], np.ndarray]
    constraints: list[ConstraintSpec] = field(default_factory=list)
    noise_std: float = 0.01
    # instability threshold of a self-constrained objective (None: always observed)
    instability_threshold: float | None = None
    # suggested modelling hyperparameters
    objective_kernel: KernelSpec | None = None
    constraint_kernels: list[KernelSpec] = field(default_factory=list)
    objective_prior: ThresholdPrior | None = None
    constraint_priors: list[ThresholdPrior] = field(default_factory=list)
    _true_min: tuple[float, np.ndarray] | None = field(default=None, repr=False)

    def feasible(self, X) -> np.ndarray:
        """Noiseless feasibility of points (rows of X)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ok = np.ones(X.shape[0], dtype=bool)
        if self.instability_threshold is not None:
            ok &= self.objective(X) <= self.instability_threshold
        for con in self.constraints:
            g = con.fn(X)
            ok &= ~np.isnan(g) & (np.nan_to_num(g, nan=np.inf) <= con.threshold)
        return ok

    def observe(self, x, rng: np.random.Generator) -> CoupledObservation:
        """Run one noisy coupled experiment at x."""
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        f = float(self.objective(x)[0])
        if self.instability_threshold is not None and f > self.instability_threshold:
            objective = Label.UNSTABLE
        else:
            objective = f + self.noise_std * float(rng.standard_normal())
        entries = []
        for con in self.constraints:
            g = float(con.fn(x)[0])
            violated = math.isnan(g) or g > con.threshold
            if con.binary:
                entries.append(Label.VIOLATED if violated else Label.SATISFIED)
            elif violated:
                entries.append(Label.VIOLATED)
            else:
                entries.append(g + self.noise_std * float(rng.standard_normal()))
        return CoupledObservation(objective, tuple(entries))

    def evaluate_best_guess(self, x, rng: np.random.Generator) -> float:
        """Noisy objective value at x, returned even where the objective is unstable."""
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        return float(self.objective(x)[0]) + self.noise_std * float(rng.standard_normal())

    def oracle(self, rng: np.random.Generator) -> Callable[[np.ndarray], CoupledObservation]:
        return lambda x: self.observe(x, rng)

    @property
    def true_min(self) -> float:
        if self._true_min is None:
            self._true_min = true_feasible_min(self)
        return self._true_min[0]


def gardner(X) -> np.ndarray:
    X = np.atleast_2d(X)
    return np.cos(10 * X[:, 0]) * np.cos(5 * X[:, 1]) + np.sin(10 * X[:, 0]) + 2.0


def branin(X) -> np.ndarray:
    """Standard Branin-Hoo on the unit square (x1 -> 15 x1 - 5, x2 -> 15 x2)."""
    X = np.atleast_2d(X)
    a = 15 * X[:, 0] - 5
    b = 15 * X[:, 1]
    return (b - 5.1 / (4 * np.pi**2) * a**2 + 5 / np.pi * a - 6) ** 2 + 10 * (1 - 1 / (8 * np.pi)) * np.cos(a) + 10


def circle(X) -> np.ndarray:
    """-sqrt(2/9 - |x - 0.5|^2); NaN outside the circle."""
    X = np.atleast_2d(X)
    inside = 2.0 / 9.0 - (X[:, 0] - 0.5) ** 2 - (X[:, 1] - 0.5) ** 2
    with np.errstate(invalid="ignore"):
        return np.where(inside >= 0, -np.sqrt(np.maximum(inside, 0.0)), np.nan)


def gardner2d() -> SyntheticProblem:
    """Self-constrained Gardner function; values above 1.5 come back as UNSTABLE."""
    return SyntheticProblem(
        "gardner",
        2,
        gardner,
        noise_std=0.01,
        instability_threshold=1.5,
        objective_kernel=KernelSpec.isometric(1.0, 0.25, 2),
        objective_prior=ThresholdPrior(0.0, 5.0),
    )


def branin_circle(case: int = 3) -> SyntheticProblem:
    """Branin restricted to a centred circle.

    case 3: circle is a level-set constraint, objective always observed.
    case 2: circle is a binary constraint absorbed by the objective model.
    case 4: as case 3, plus the objective is self-constrained at 20.
    """
    binary = case == 2
    prob = SyntheticProblem(
        "branin-circle",
        2,
        branin,
        constraints=[ConstraintSpec(circle, 0.0, binary=binary)],
        noise_std=0.01,
        objective_kernel=KernelSpec.isometric(2500.0, 0.2, 2),
        objective_prior=None,
    )
    if not binary:
        prob.constraint_kernels = [KernelSpec.isometric(0.25, 0.3, 2)]
        prob.constraint_priors = [ThresholdPrior(0.0, 2.0)]
    if case == 2:
        prob.objective_kernel = KernelSpec.isometric(2500.0, 0.3, 2)
        prob.objective_prior = ThresholdPrior(0.0, 100.0)
    if case == 4:
        prob.instability_threshold = 20.0
        prob.objective_prior = ThresholdPrior(0.0, 20.0)
    return prob


def example_1d():
    """The fixed five-point 1-D dataset with its kernel and noise."""
    data = HybridDataset(np.array([[0.1], [0.3], [0.5]]), np.array([0.5, 2.0, 1.0]), np.array([[0.7], [0.9]]))
    return data, KernelSpec.isometric(0.5, 0.2, 1), NoiseSpec(0.02)


PROBLEMS = {
    "gardner": lambda case=1: gardner2d(),
    "branin-circle": branin_circle,
}


def make_problem(name: str, case: int | None = None) -> SyntheticProblem:
    if name not in PROBLEMS:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}")
    return PROBLEMS[name]() if case is None else PROBLEMS[name](case)


def true_feasible_min(problem: SyntheticProblem, grid_density: int = 1000) -> tuple[float, np.ndarray]:
    """Brute-force feasible minimum of the noiseless objective plus local polish.

    Supports dimension <= 3 (the grid holds ``grid_density ** dim`` points).
    """
    if problem.dim > 3:
        raise NotImplementedError("dense-grid ground truth is limited to dimension <= 3")
    axes = [np.linspace(0.0, 1.0, grid_density)] * problem.dim
    best_val, best_x = np.inf, None
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = np.stack([m.reshape(-1) for m in mesh], axis=1)
    for chunk in np.array_split(flat, max(1, flat.shape[0] // 200_000)):
        vals = problem.objective(chunk)
        vals = np.where(problem.feasible(chunk), vals, np.inf)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_x = float(vals[i]), chunk[i]
    if best_x is None or not np.isfinite(best_val):
        raise ValueError("no feasible grid point")

    def penalized(x):
        x = np.clip(x, 0.0, 1.0)
        if not problem.feasible(x[None, :])[0]:
            return np.inf
        return float(problem.objective(x[None, :])[0])

    res = optimize.minimize(penalized, best_x, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2000})
    if np.isfinite(res.fun) and res.fun < best_val:
        best_val, best_x = float(res.fun), np.clip(res.x, 0.0, 1.0)
    return best_val, np.asarray(best_x)


def inference_regret(y_bg_trace: Sequence[float], true_min: float) -> np.ndarray:
    return np.asarray(y_bg_trace, dtype=float) - float(true_min)


def case_config(problem: SyntheticProblem, case: int) -> CaseConfig:
    """Modelling setup for one of the four cases on a synthetic problem."""
    case = Case(case)
    noise = NoiseSpec(problem.noise_std)
    level_sets = tuple(
        FunctionSpec(k, noise, p) for k, p in zip(problem.constraint_kernels, problem.constraint_priors)
    )
    n_binary = sum(con.binary for con in problem.constraints)
    prior = None if case is Case.LEVEL_SET_ONLY else problem.objective_prior
    return CaseConfig(case, FunctionSpec(problem.objective_kernel, noise, prior), level_sets, n_binary)


PROBLEM_CASES = {"gardner": (1,), "branin-circle": (2, 3, 4)}


def problem_case(problem: SyntheticProblem) -> int:
    """The modelling case implied by the problem's constraint structure."""
    level = any(not c.binary for c in problem.constraints)
    binary = any(c.binary for c in problem.constraints)
    self_constrained = problem.instability_threshold is not None
    if level:
        return 4 if self_constrained or binary else 3
    return 2 if binary else 1


def run_problem(problem: SyntheticProblem, case: int, T: int, seed: int, acq=None):
    """One seeded BO run with per-iteration best-guess evaluations.

    Returns (state, regret trace).
    """
    from .loop import make_streams, run

    streams = make_streams(seed)
    state = run(
        case_config(problem, case),
        problem.oracle(streams["noise"]),
        T,
        acq,
        streams=streams,
        bg_evaluator=lambda x: problem.evaluate_best_guess(x, streams["noise"]),
    )
    return state, inference_regret([np.nan if y is None else y for y in state.y_bg_trace], problem.true_min)


@dataclass
class RandomSearchTrace:
    x: np.ndarray
    observations: list
    best_guess: list
    y_bg: np.ndarray
    regret: np.ndarray


def random_search_baseline(problem: SyntheticProblem, T: int, rng: np.random.Generator) -> RandomSearchTrace:
    """Uniform proposals; the best guess is the lowest observed feasible point so far.

    Before the first feasible observation the best guess is None and y_bg/regret
    hold NaN.
    """
    X = rng.random((T, problem.dim))
    observations, guesses, y_bg = [], [], []
    best_x, best_y = None, math.inf
    for x in X:
        obs = problem.observe(x, rng)
        observations.append(obs)
        feasible = obs.objective_stable and all(
            e is Label.SATISFIED or not isinstance(e, Label) for e in obs.constraints
        )
        if feasible and float(obs.objective) < best_y:
            best_x, best_y = x.copy(), float(obs.objective)
        guesses.append(None if best_x is None else best_x)
        y_bg.append(np.nan if best_x is None else problem.evaluate_best_guess(best_x, rng))
    y_bg = np.asarray(y_bg)
    return RandomSearchTrace(X, observations, guesses, y_bg, inference_regret(y_bg, problem.true_min))


@dataclass
class StatsReport:
    method: str
    regret: np.ndarray  # (n_runs, T), failed runs excluded
    thresholds: np.ndarray  # (n_runs, T) objective threshold trace (NaN when not modelled)
    constraint_thresholds: np.ndarray  # (n_runs, M_L, T)
    failures: int = 0
    errors: list[str] = field(default_factory=list)
    final_y_bg: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mean_regret(self) -> np.ndarray:
        return np.nanmean(self.regret, axis=0)

    @property
    def median_regret(self) -> np.ndarray:
        return np.nanmedian(self.regret, axis=0)

    def final_threshold(self) -> tuple[float, float]:
        last = self.thresholds[:, -1]
        if np.all(np.isnan(last)):
            return math.nan, math.nan
        return float(np.nanmean(last)), float(np.nanstd(last))

    def final_constraint_thresholds(self) -> list[tuple[float, float]]:
        if self.constraint_thresholds.size == 0:
            return []
        last = self.constraint_thresholds[:, :, -1]
        return [(float(np.mean(last[:, j])), float(np.std(last[:, j]))) for j in range(last.shape[1])]

    def summary(self) -> dict:
        mean_c, std_c = self.final_threshold() if self.thresholds.size else (math.nan, math.nan)
        return {
            "method": self.method,
            "runs": int(self.regret.shape[0]),
            "failures": self.failures,
            "final_regret_mean": float(np.nanmean(self.regret[:, -1])) if self.regret.size else math.nan,
            "final_regret_median": float(np.nanmedian(self.regret[:, -1])) if self.regret.size else math.nan,
            "final_y_bg_mean": float(np.nanmean(self.final_y_bg)) if self.final_y_bg.size else math.nan,
            "final_threshold_mean": mean_c,
            "final_threshold_std": std_c,
            "final_constraint_thresholds": [list(t) for t in self.final_constraint_thresholds()],
            "errors": list(self.errors),
        }


def stats_runner(
    problem: SyntheticProblem, method: str, T: int, n_repeats: int, seed: int = 0, case: int | None = None, acq=None
) -> StatsReport:
    """Independent seeded runs (seed, seed+1, ...) aggregated per iteration.

    ``method`` is "mesco" (the BO loop; mES when there are no level-set
    constraints) or "random". A run that raises or stops early is counted as
    a failure and excluded.
    """
    if method not in ("mesco", "random"):
        raise ValueError(f"unknown method {method!r}")
    if case is None:
        case = problem_case(problem)
    n_level = len(problem.constraint_kernels)
    regrets, thresholds, con_thresholds, finals, errors = [], [], [], [], []
    failures = 0
    for r in range(n_repeats):
        run_seed = seed + r
        try:
            if method == "random":
                trace = random_search_baseline(problem, T, np.random.default_rng(run_seed))
                regret = trace.regret
                c = np.full(T, np.nan)
                cc = np.full((n_level, T), np.nan)
                final = trace.y_bg[-1]
            else:
                state, regret = run_problem(problem, case, T, run_seed, acq)
                if state.errors or state.iteration != T:
                    raise RuntimeError("; ".join(state.errors) or "run stopped early")
                c = np.array([np.nan if v is None else v for v in state.threshold_trace])
                cc = np.array(state.constraint_threshold_traces).reshape(-1, T)
                final = state.y_bg_trace[-1]
        except Exception as exc:  # noqa: BLE001 - a failed repeat is reported, not fatal
            failures += 1
            errors.append(f"seed {run_seed}: {exc}")
            continue
        regrets.append(regret)
        thresholds.append(c)
        con_thresholds.append(cc)
        finals.append(final)
    shape_c = (len(regrets), cc.shape[0] if regrets else 0, T)
    return StatsReport(
        method,
        np.array(regrets).reshape(len(regrets), T),
        np.array(thresholds).reshape(len(regrets), T),
        np.array(con_thresholds).reshape(shape_c),
        failures,
        errors,
        np.array(finals, dtype=float),
    )
