"""Run configuration: a flat ``dotted.key = value`` text file plus overrides.

Example::

    # Simulation II
    problem = branin-circle
    case = 3
    iters = 50
    seed = 7
    acq.samples = 10
    objective.variance = 2500
    constraint1.lengthscale = 0.3

Blank lines and ``#`` comments are ignored. Function sections are
``objective`` and ``constraint1``, ``constraint2``, ... (level-set
constraints in observation order); each takes ``variance``,
``lengthscale``, ``noise`` (modelling noise; a simulated oracle keeps its
own), ``prior_mean`` and ``prior_std``. Keys left out fall back to the
problem's defaults. The ``external`` problem (ask-tell with
an outside oracle) also needs ``dim``, ``n_level_sets`` and ``n_binary``,
plus every kernel value.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .acquisition import AcquisitionConfig
from .benchmarks import PROBLEM_CASES, PROBLEMS, case_config, make_problem
from .gpcr import ThresholdPrior
from .kernels import KernelSpec, NoiseSpec
from .loop import Case, CaseConfig, FunctionSpec


class ConfigError(ValueError):
    """Invalid or missing configuration (exit status 2)."""


TOP_KEYS = {
    "problem": str,
    "case": int,
    "iters": int,
    "seed": int,
    "repeats": int,
    "out": str,
    "dim": int,
    "n_level_sets": int,
    "n_binary": int,
}
ACQ_KEYS = {
    "samples": ("n_samples", int),
    "delta": ("delta", float),
    "max_virtual_evals": ("max_virtual_evals", int),
    "restart_tolerance": ("restart_tolerance", float),
    "restarts": ("n_restarts", int),
    "sampler_restarts": ("sampler_restarts", int),
    "candidate_grid": ("candidate_grid", int),
}
FUNCTION_KEYS = {"variance": float, "lengthscale": float, "noise": float, "prior_mean": float, "prior_std": float}
_SECTION = re.compile(r"^(objective|constraint(\d+))$")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_text(p.read_text(encoding="utf-8"), str(p))


def _convert(key: str, value, kind):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


@dataclass
class RunConfig:
    problem: str = "gardner"
    case: int | None = None
    iters: int = 30
    seed: int = 0
    repeats: int = 20
    out: str = "out"
    dim: int | None = None
    n_level_sets: int = 0
    n_binary: int = 0
    acq: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    # per-function overrides: "objective" or "constraint<j>" -> {key: value}
    functions: dict[str, dict[str, float]] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        cfg = cls()
        acq = {}
        for key, value in values.items():
            if key in TOP_KEYS:
                setattr(cfg, key, _convert(key, value, TOP_KEYS[key]))
            elif key.startswith("acq."):
                name = key[4:]
                if name not in ACQ_KEYS:
                    raise ConfigError(f"unknown key {key!r}")
                field_name, kind = ACQ_KEYS[name]
                acq[field_name] = _convert(key, value, kind)
            elif "." in key:
                section, name = key.split(".", 1)
                if not _SECTION.match(section) or name not in FUNCTION_KEYS:
                    raise ConfigError(f"unknown key {key!r}")
                if section != "objective" and int(section[10:]) < 1:
                    raise ConfigError(f"{key}: constraints are numbered from 1")
                cfg.functions.setdefault(section, {})[name] = _convert(key, value, FUNCTION_KEYS[name])
            else:
                raise ConfigError(f"unknown key {key!r}")
        try:
            cfg.acq = AcquisitionConfig(**acq)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self):
        if self.problem != "external" and self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {sorted(PROBLEMS)} or 'external'")
        if self.case is not None and self.case not in (1, 2, 3, 4):
            raise ConfigError(f"case must be 1-4, got {self.case}")
        if self.problem in PROBLEM_CASES and self.case is not None and self.case not in PROBLEM_CASES[self.problem]:
            raise ConfigError(f"problem {self.problem!r} supports cases {PROBLEM_CASES[self.problem]}, got {self.case}")
        if self.iters < 1 or self.repeats < 1:
            raise ConfigError("iters and repeats must be at least 1")
        if self.problem == "external":
            if self.case is None or self.dim is None or self.dim < 1:
                raise ConfigError("the external problem needs case and dim")
            if self.n_level_sets < 0 or self.n_binary < 0:
                raise ConfigError("constraint counts must be non-negative")
        for section, values in self.functions.items():
            for key, v in values.items():
                if key in ("variance", "lengthscale", "prior_std") and not v > 0:
                    raise ConfigError(f"{section}.{key} must be positive")
                if key == "noise" and not v >= 0:
                    raise ConfigError(f"{section}.noise must be non-negative")
                if not math.isfinite(v):
                    raise ConfigError(f"{section}.{key} must be finite")

    def resolved_case(self) -> int:
        if self.case is not None:
            return self.case
        return PROBLEM_CASES[self.problem][0]

    def make_problem(self):
        if self.problem == "external":
            return None
        problem = make_problem(self.problem, self.resolved_case())
        obj = self.functions.get("objective", {})
        if obj:
            k = problem.objective_kernel
            problem.objective_kernel = KernelSpec.isometric(
                obj.get("variance", k.variance), obj.get("lengthscale", k.lengthscales[0]), problem.dim
            )
            if problem.objective_prior is not None or "prior_std" in obj:
                p = problem.objective_prior or ThresholdPrior(0.0, 1.0)
                problem.objective_prior = ThresholdPrior(obj.get("prior_mean", p.mean), obj.get("prior_std", p.std_dev))
        for j, (k, p) in enumerate(zip(list(problem.constraint_kernels), list(problem.constraint_priors))):
            con = self.functions.get(f"constraint{j + 1}", {})
            problem.constraint_kernels[j] = KernelSpec.isometric(con.get("variance", k.variance), con.get("lengthscale", k.lengthscales[0]), problem.dim)
            problem.constraint_priors[j] = ThresholdPrior(con.get("prior_mean", p.mean), con.get("prior_std", p.std_dev))
        extra = [s for s in self.functions if s.startswith("constraint") and int(s[10:]) > len(problem.constraint_kernels)]
        if extra:
            raise ConfigError(f"problem {self.problem!r} has {len(problem.constraint_kernels)} level-set constraint(s); got settings for {extra}")
        return problem

    def case_config(self) -> CaseConfig:
        try:
            if self.problem != "external":
                base = case_config(self.make_problem(), self.resolved_case())
                return replace(
                    base,
                    objective=self._with_noise(base.objective, "objective"),
                    level_sets=tuple(self._with_noise(s, f"constraint{j + 1}") for j, s in enumerate(base.level_sets)),
                )
            case = Case(self.case)
            obj = self._external_spec("objective", with_prior=case is not Case.LEVEL_SET_ONLY)
            level = tuple(self._external_spec(f"constraint{j + 1}", with_prior=True) for j in range(self.n_level_sets))
            return CaseConfig(case, obj, level, self.n_binary)
        except ConfigError:
            raise
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None

    def _with_noise(self, spec: FunctionSpec, section: str) -> FunctionSpec:
        # the simulated oracle keeps the problem's noise; this only changes the model
        values = self.functions.get(section, {})
        return replace(spec, noise=NoiseSpec(values["noise"])) if "noise" in values else spec

    def _external_spec(self, section: str, with_prior: bool) -> FunctionSpec:
        values = self.functions.get(section, {})
        missing = [k for k in ("variance", "lengthscale", "noise") if k not in values]
        if missing:
            raise ConfigError(f"external problem: missing {', '.join(section + '.' + k for k in missing)}")
        kernel = KernelSpec.isometric(values["variance"], values["lengthscale"], self.dim)
        prior = ThresholdPrior(values.get("prior_mean", 0.0), values.get("prior_std", 1.0)) if with_prior else None
        return FunctionSpec(kernel, NoiseSpec(values["noise"]), prior)
