"""Command-line entry point.

    gpcrbo bench   [--config FILE] [--problem P] [--case C] [--iters T] [--seed S] [--out DIR] [--set key=value ...]
    gpcrbo stats   ... [--repeats N] [--method mesco|random]
    gpcrbo asktell ... (line-delimited JSON on stdin/stdout)

Exit status: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import IO

import numpy as np

from .benchmarks import inference_regret, stats_runner
from .config import ConfigError, RunConfig, load_file
from .gpcr import HybridDataset
from .loop import (
    BOState,
    CaseConfig,
    CoupledObservation,
    Label,
    current_best_guess,
    initial_state,
    make_streams,
    observe,
    run,
    suggest,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def encode_entry(value) -> float | str:
    return value.value if isinstance(value, Label) else float(value)


def decode_entry(value, allowed: tuple[Label, ...]):
    """JSON value to a float or one of the allowed labels."""
    if isinstance(value, str):
        for label in allowed:
            if value == label.value:
                return label
        raise ValueError(f"expected a number or one of {[a.value for a in allowed]}, got {value!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {value!r}")
    return float(value)


def decode_observation(msg: dict, cfg: CaseConfig) -> CoupledObservation:
    if "objective" not in msg:
        raise ValueError("observe needs an 'objective' entry")
    constraints = msg.get("constraints", [])
    if not isinstance(constraints, list):
        raise ValueError("'constraints' must be a list")
    if len(constraints) != cfg.n_constraints:
        raise ValueError(f"expected {cfg.n_constraints} constraint entries, got {len(constraints)}")
    objective = decode_entry(msg["objective"], (Label.UNSTABLE,))
    entries = []
    for j, value in enumerate(constraints):
        binary = j >= cfg.n_level_sets
        entries.append(decode_entry(value, (Label.SATISFIED, Label.VIOLATED) if binary else (Label.VIOLATED,)))
    return CoupledObservation(objective, tuple(entries))


def _settings(args) -> RunConfig:
    values = load_file(args.config) if args.config else {}
    for key in ("problem", "case", "iters", "seed", "out", "repeats"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return RunConfig.from_mapping(values)


# bench


def bench_header(cfg: CaseConfig) -> list[str]:
    d = cfg.dim
    cols = ["iter"] + [f"x{i + 1}" for i in range(d)] + ["y"] + [f"g{j + 1}" for j in range(cfg.n_constraints)]
    if cfg.objective_is_gpcr:
        cols.append("c_hat")
    cols += [f"c_hat_{j + 1}" for j in range(cfg.n_level_sets)]
    cols += [f"bg_x{i + 1}" for i in range(d)] + ["y_bg", "regret"]
    return cols


def bench_rows(state: BOState, true_min: float) -> list[list]:
    rows = []
    for r in state.records:
        row = [r.iteration, *map(float, r.x), encode_entry(r.observation.objective)]
        row += [encode_entry(e) for e in r.observation.constraints]
        if state.config.objective_is_gpcr:
            row.append(r.threshold)
        row += list(r.constraint_thresholds)
        y_bg = math.nan if r.y_bg is None else r.y_bg
        row += [*map(float, r.x_bg), y_bg, float(inference_regret([y_bg], true_min)[0])]
        rows.append(row)
    return rows


def _write_csv(path: Path, header: list[str], rows: list[list], dat: bool = False):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    if dat:
        write_dat(path.with_suffix(".dat"), header, rows)


def write_dat(path: Path, header: list[str], rows: list[list]):
    """Whitespace-separated copy for gnuplot: '#' header, labels quoted, NaN as NaN."""

    def cell(v):
        if isinstance(v, str):
            return f'"{v}"'
        return "NaN" if isinstance(v, float) and math.isnan(v) else repr(v)

    with path.open("w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in rows:
            fh.write(" ".join(cell(v) for v in row) + "\n")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, allow_nan=True) + "\n", encoding="utf-8")


def _counts(data: HybridDataset) -> dict:
    return {"stable": data.n_stable, "unstable": data.n_unstable}


def cmd_bench(settings: RunConfig, dat: bool = False) -> int:
    problem = settings.make_problem()
    if problem is None:
        raise ConfigError("bench needs a built-in problem; use asktell for an external oracle")
    cfg = settings.case_config()
    out = Path(settings.out)
    out.mkdir(parents=True, exist_ok=True)
    streams = make_streams(settings.seed)
    state = run(
        cfg,
        problem.oracle(streams["noise"]),
        settings.iters,
        settings.acq,
        streams=streams,
        bg_evaluator=lambda x: problem.evaluate_best_guess(x, streams["noise"]),
    )
    true_min = problem.true_min
    _write_csv(out / "run.csv", bench_header(cfg), bench_rows(state, true_min), dat)
    last = state.records[-1] if state.records else None
    summary = {
        "problem": settings.problem,
        "case": int(cfg.case),
        "seed": settings.seed,
        "iters": settings.iters,
        "completed": state.iteration,
        "x0": None if state.initial_x is None else state.initial_x.tolist(),
        "x_bg": None if last is None else last.x_bg.tolist(),
        "y_bg": None if last is None else last.y_bg,
        "regret": None if last is None else last.y_bg - true_min,
        "true_min": true_min,
        "c_hat": None if last is None else last.threshold,
        "c_hat_constraints": [] if last is None else last.constraint_thresholds,
        "objective_counts": _counts(state.objective_data),
        "constraint_counts": [_counts(d) for d in state.constraint_data],
        "errors": state.errors,
        "notes": state.notes,
    }
    _write_json(out / "summary.json", summary)
    if state.errors:
        for e in state.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# stats


def cmd_stats(settings: RunConfig, method: str, dat: bool = False) -> int:
    problem = settings.make_problem()
    if problem is None:
        raise ConfigError("stats needs a built-in problem")
    case = settings.resolved_case()
    cfg = settings.case_config()
    out = Path(settings.out)
    out.mkdir(parents=True, exist_ok=True)
    report = stats_runner(problem, method, settings.iters, settings.repeats, settings.seed, case, settings.acq)
    T = settings.iters
    iters = np.arange(1, T + 1)
    if report.regret.shape[0] == 0:
        mean = median = np.full(T, np.nan)
    else:
        mean, median = report.mean_regret, report.median_regret
    _write_csv(out / "regret_mean.csv", ["iter", "regret_mean"], [[int(i), float(v)] for i, v in zip(iters, mean)], dat)
    _write_csv(out / "regret_median.csv", ["iter", "regret_median"], [[int(i), float(v)] for i, v in zip(iters, median)], dat)
    header, cols = ["iter"], []
    runs = report.regret.shape[0]
    if cfg.objective_is_gpcr:
        header += ["c_hat_mean", "c_hat_std"]
        trace = report.thresholds if runs else np.full((1, T), np.nan)
        cols += [_nan_stat(np.nanmean, trace), _nan_stat(np.nanstd, trace)]
    for j in range(cfg.n_level_sets):
        header += [f"c_hat_{j + 1}_mean", f"c_hat_{j + 1}_std"]
        trace = report.constraint_thresholds[:, j, :] if runs else np.full((1, T), np.nan)
        cols += [_nan_stat(np.nanmean, trace), _nan_stat(np.nanstd, trace)]
    _write_csv(out / "thresholds.csv", header, [[int(i), *(float(c[k]) for c in cols)] for k, i in enumerate(iters)], dat)
    summary = report.summary()
    summary.update({"problem": settings.problem, "case": case, "iters": T, "repeats": settings.repeats, "seed": settings.seed})
    _write_json(out / "summary.json", summary)
    if report.failures:
        for e in report.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _nan_stat(fn, trace: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        if np.all(np.isnan(trace)):
            return np.full(trace.shape[1], np.nan)
        return fn(trace, axis=0)


# ask-tell


class AskTellSession:
    """Turn-based suggest/observe protocol around the BO loop.

    ``handle`` takes one input line and returns the reply messages. Datasets
    are written to ``out/datasets.json`` after every accepted observation;
    ``quit`` (or end of input) writes ``out/summary.json``.
    """

    def __init__(self, settings: RunConfig):
        self.settings = settings
        self.cfg = settings.case_config()
        self.out = Path(settings.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.streams = make_streams(settings.seed)
        self.state = initial_state(self.cfg)
        self.log: list[dict] = []
        self.iter = 0
        self.pending = self.streams["init"].random(self.cfg.dim)
        self.thresholds = None
        self.done = False

    def prompt(self) -> dict:
        return {"type": "suggest", "iter": self.iter, "x": self.pending.tolist()}

    def _error(self, msg: str) -> list[dict]:
        return [{"type": "error", "msg": msg}, self.prompt()]

    def handle(self, line: str) -> list[dict]:
        text = line.strip()
        if not text:
            return []
        if text == "quit":
            return self.quit()
        try:
            msg = json.loads(text)
        except json.JSONDecodeError as exc:
            return self._error(f"malformed JSON: {exc.msg}")
        if not isinstance(msg, dict) or "type" not in msg:
            return self._error("expected an object with a 'type' field")
        kind = msg["type"]
        if kind == "observe":
            return self._observe(msg)
        if kind == "best_guess":
            return self._best_guess()
        if kind == "quit":
            return self.quit()
        return self._error(f"unknown message type {kind!r}")

    def _observe(self, msg: dict) -> list[dict]:
        try:
            obs = decode_observation(msg, self.cfg)
            observe(self.state, self.pending, obs)
        except ValueError as exc:
            return self._error(f"observation rejected: {exc}")
        self.log.append({"x": self.pending.tolist(), "objective": encode_entry(obs.objective), "constraints": [encode_entry(e) for e in obs.constraints]})
        self._persist()
        x_next, c_obj, c_con, _, _ = suggest(self.state, self.settings.acq, self.streams)
        self.thresholds = (c_obj, c_con)
        self.pending = x_next
        self.iter += 1
        return [self.prompt()]

    def _best_guess(self) -> list[dict]:
        if self.thresholds is None:
            return self._error("no observations yet")
        c_obj, c_con = self.thresholds
        x_bg = current_best_guess(self.state, c_obj, c_con, self.settings.acq, self.streams["best_guess"])
        return [{"type": "best_guess", "iter": self.iter, "x": x_bg.tolist()}]

    def _persist(self):
        doc = {
            "observations": self.log,
            "objective": self.state.objective_data.to_json(),
            "constraints": [d.to_json() for d in self.state.constraint_data],
        }
        _write_json(self.out / "datasets.json", doc)

    def quit(self) -> list[dict]:
        if self.done:
            return []
        self.done = True
        c_obj, c_con = self.thresholds if self.thresholds is not None else (None, [])
        summary = {
            "observations": len(self.log),
            "c_hat": c_obj,
            "c_hat_constraints": list(c_con),
            "objective_counts": _counts(self.state.objective_data),
            "constraint_counts": [_counts(d) for d in self.state.constraint_data],
            "notes": self.state.notes,
        }
        if self.thresholds is not None:
            summary["x_bg"] = self._best_guess()[0]["x"]
        _write_json(self.out / "summary.json", summary)
        return [{"type": "bye", "observations": len(self.log)}]


def cmd_asktell(settings: RunConfig, stdin: IO[str], stdout: IO[str]) -> int:
    session = AskTellSession(settings)

    def emit(msgs):
        for m in msgs:
            stdout.write(json.dumps(m) + "\n")
        stdout.flush()

    emit([session.prompt()])
    for line in stdin:
        emit(session.handle(line))
        if session.done:
            break
    if not session.done:
        emit(session.quit())
    return EXIT_OK


# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpcrbo", description="Crash-aware constrained Bayesian optimization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log EP and loop warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--problem", help="gardner, branin-circle or external")
        p.add_argument("--case", type=int, help="modelling case 1-4")
        p.add_argument("--iters", type=int, help="BO iterations after the initial point")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
        return p

    bench = common(sub.add_parser("bench", help="one seeded run on a built-in problem"))
    bench.add_argument("--dat", action="store_true", help="also write gnuplot .dat copies of the CSVs")
    stats = common(sub.add_parser("stats", help="repeated seeded runs with aggregate regret"))
    stats.add_argument("--dat", action="store_true", help="also write gnuplot .dat copies of the CSVs")
    stats.add_argument("--repeats", type=int, help="number of runs")
    stats.add_argument("--method", choices=("mesco", "random"), default="mesco")
    common(sub.add_parser("asktell", help="JSON ask-tell session on stdin/stdout"))
    return parser


def main(argv=None, stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = _settings(args)
        if args.command == "bench":
            return cmd_bench(settings, args.dat)
        if args.command == "stats":
            return cmd_stats(settings, args.method, args.dat)
        return cmd_asktell(settings, stdin or sys.stdin, stdout or sys.stdout)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
