import csv
import io
import json

import numpy as np
import pytest

from gpcrbo import cli
from gpcrbo.benchmarks import SyntheticProblem
from gpcrbo.cli import AskTellSession, main
from gpcrbo.config import ConfigError, RunConfig, load_file, parse_text
from gpcrbo.gpcr import HybridDataset, fit
from gpcrbo.loop import Case

FAST = ["--set", "acq.samples=2", "--set", "acq.max_virtual_evals=20", "--set", "acq.candidate_grid=64", "--set", "acq.restarts=1", "--set", "acq.sampler_restarts=1"]
FAST_MAP = {"acq.samples": "2", "acq.max_virtual_evals": "20", "acq.candidate_grid": "64", "acq.restarts": "1", "acq.sampler_restarts": "1"}


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def parse_cell(v):
    return v if v in ("unstable", "violated", "satisfied") else float(v)


# configuration


def test_parse_text_handles_comments_and_blanks():
    values = parse_text("# header\nproblem = gardner  # inline\n\n iters=5\nobjective.variance = 2.0\n")
    assert values == {"problem": "gardner", "iters": "5", "objective.variance": "2.0"}
    with pytest.raises(ConfigError):
        parse_text("no equals sign here")


def test_missing_config_file_names_the_path(tmp_path, capsys):
    path = tmp_path / "nope.cfg"
    assert main(["bench", "--config", str(path)]) == 2
    assert str(path) in capsys.readouterr().err
    with pytest.raises(ConfigError, match="nope.cfg"):
        load_file(path)


@pytest.mark.parametrize(
    "values",
    [
        {"problem": "rosenbrock"},
        {"case": "5"},
        {"problem": "gardner", "case": "3"},
        {"iters": "0"},
        {"iters": "ten"},
        {"acq.delta": "1.5"},
        {"acq.unknown": "1"},
        {"objective.variance": "-1"},
        {"constraint0.variance": "1"},
        {"colour": "blue"},
        {"problem": "external", "case": "1"},
    ],
)
def test_invalid_configs(values):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(values)


def test_bad_config_exit_code(capsys):
    assert main(["bench", "--problem", "gardner", "--case", "4"]) == 2
    assert main(["bench", "--set", "nonsense"]) == 2
    assert main(["bench", "--iters", "x"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("problem = branin-circle\ncase = 3\nobjective.lengthscale = 0.25\nconstraint1.prior_std = 1.5\nacq.delta = 0.1\n")
    cfg = RunConfig.from_mapping({**load_file(path), "iters": "7"})
    assert cfg.iters == 7 and cfg.acq.delta == 0.1
    problem = cfg.make_problem()
    assert problem.objective_kernel.lengthscales == (0.25, 0.25)
    assert problem.constraint_priors[0].std_dev == 1.5
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"problem": "branin-circle", "case": "3", "constraint2.variance": "1"}).make_problem()


def test_modelling_noise_override_leaves_oracle_alone():
    cfg = RunConfig.from_mapping({"problem": "gardner", "objective.noise": "0.05"})
    assert cfg.case_config().objective.noise.std_dev == 0.05
    assert cfg.make_problem().noise_std == 0.01


def test_external_problem_config():
    values = {"problem": "external", "case": "3", "dim": "2", "n_level_sets": "1"}
    with pytest.raises(ConfigError, match="missing"):
        RunConfig.from_mapping(values).case_config()
    for sec in ("objective", "constraint1"):
        values.update({f"{sec}.variance": "1", f"{sec}.lengthscale": "0.3", f"{sec}.noise": "0.01"})
    cfg = RunConfig.from_mapping(values).case_config()
    assert cfg.case is Case.LEVEL_SET_ONLY and cfg.dim == 2 and cfg.objective.prior is None
    assert main(["bench", "--problem", "external", "--case", "3"]) == 2


# bench


def test_bench_gardner_schema(tmp_path):
    out = tmp_path / "g"
    assert main(["bench", "--problem", "gardner", "--case", "1", "--iters", "30", "--seed", "7", "--out", str(out)]) == 0
    header, rows = read_csv(out / "run.csv")
    assert header == ["iter", "x1", "x2", "y", "c_hat", "bg_x1", "bg_x2", "y_bg", "regret"]
    assert len(rows) == 30 and all(len(r) == len(header) for r in rows)
    assert [int(r[0]) for r in rows] == list(range(1, 31))
    for r in rows:
        assert isinstance(parse_cell(r[3]), (float, str))
        assert all(np.isfinite(float(v)) for i, v in enumerate(r) if i != 3)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["c_hat"] is not None and summary["completed"] == 30
    assert summary["objective_counts"]["stable"] + summary["objective_counts"]["unstable"] == 31


def test_bench_branin_has_constraint_columns(tmp_path):
    out = tmp_path / "b"
    assert main(["bench", "--problem", "branin-circle", "--case", "3", "--iters", "3", "--out", str(out), "--dat", *FAST]) == 0
    header, rows = read_csv(out / "run.csv")
    assert header == ["iter", "x1", "x2", "y", "g1", "c_hat_1", "bg_x1", "bg_x2", "y_bg", "regret"]
    for r in rows:
        assert isinstance(parse_cell(r[4]), float) or r[4] == "violated"
        assert r[3] != "unstable"
    dat = (out / "run.dat").read_text().splitlines()
    assert dat[0] == "# " + " ".join(header) and len(dat) == 4
    assert len(json.loads((out / "summary.json").read_text())["c_hat_constraints"]) == 1


def test_bench_oracle_error_leaves_partial_csv(tmp_path, monkeypatch, capsys):
    original = SyntheticProblem.oracle

    def flaky(self, rng):
        inner = original(self, rng)
        calls = []

        def oracle(x):
            calls.append(1)
            if len(calls) > 3:
                raise RuntimeError("rig offline")
            return inner(x)

        return oracle

    monkeypatch.setattr(SyntheticProblem, "oracle", flaky)
    out = tmp_path / "e"
    assert main(["bench", "--problem", "gardner", "--iters", "6", "--out", str(out), *FAST]) == 1
    _, rows = read_csv(out / "run.csv")
    assert len(rows) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert "rig offline" in summary["errors"][0] and summary["completed"] == 2
    assert "rig offline" in capsys.readouterr().err


# stats


def test_stats_single_repeat_equals_bench(tmp_path):
    assert main(["bench", "--problem", "gardner", "--iters", "3", "--seed", "4", "--out", str(tmp_path / "one"), *FAST]) == 0
    assert main(["stats", "--problem", "gardner", "--iters", "3", "--seed", "4", "--repeats", "1", "--out", str(tmp_path / "agg"), *FAST]) == 0
    _, bench_rows = read_csv(tmp_path / "one" / "run.csv")
    header, mean_rows = read_csv(tmp_path / "agg" / "regret_mean.csv")
    assert header == ["iter", "regret_mean"]
    assert [float(r[1]) for r in mean_rows] == [float(r[-1]) for r in bench_rows]
    _, median_rows = read_csv(tmp_path / "agg" / "regret_median.csv")
    assert median_rows == mean_rows
    header, thr = read_csv(tmp_path / "agg" / "thresholds.csv")
    assert header == ["iter", "c_hat_mean", "c_hat_std"]
    assert [float(r[1]) for r in thr] == [float(r[4]) for r in bench_rows]
    assert all(float(r[2]) == 0.0 for r in thr)


def test_stats_mixed_case_exposes_both_thresholds(tmp_path):
    out = tmp_path / "m"
    assert main(["stats", "--problem", "branin-circle", "--case", "4", "--iters", "2", "--repeats", "2", "--out", str(out), "--dat", *FAST]) == 0
    header, rows = read_csv(out / "thresholds.csv")
    assert header == ["iter", "c_hat_mean", "c_hat_std", "c_hat_1_mean", "c_hat_1_std"]
    assert len(rows) == 2
    assert (out / "thresholds.dat").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["runs"] == 2 and summary["case"] == 4


def test_stats_random_baseline(tmp_path):
    out = tmp_path / "r"
    assert main(["stats", "--problem", "gardner", "--method", "random", "--iters", "10", "--repeats", "3", "--out", str(out)]) == 0
    _, rows = read_csv(out / "regret_mean.csv")
    assert len(rows) == 10


# ask-tell


def session(tmp_path, problem="gardner", case="1", seed="0", **extra):
    return AskTellSession(RunConfig.from_mapping({"problem": problem, "case": case, "seed": seed, "out": str(tmp_path), **FAST_MAP, **extra}))


def test_asktell_three_observes(tmp_path):
    s = session(tmp_path)
    iters = [s.prompt()["iter"]]
    for value in (1.0, "unstable", 0.7):
        replies = s.handle(json.dumps({"type": "observe", "objective": value}))
        assert replies[-1]["type"] == "suggest"
        iters.append(replies[-1]["iter"])
    assert iters == [0, 1, 2, 3]
    doc = json.loads((tmp_path / "datasets.json").read_text())
    assert len(doc["observations"]) == 3
    data = HybridDataset.from_json(doc["objective"])
    assert (data.n_stable, data.n_unstable) == (2, 1)
    assert s.handle("quit")[0]["type"] == "bye"
    assert json.loads((tmp_path / "summary.json").read_text())["observations"] == 3


def test_asktell_unstable_observation_adds_unstable_point(tmp_path):
    s = session(tmp_path)
    s.handle(json.dumps({"type": "observe", "objective": 1.0}))
    before = s.state.objective_data.n_unstable
    s.handle(json.dumps({"type": "observe", "objective": "unstable"}))
    assert s.state.objective_data.n_unstable == before + 1


@pytest.mark.parametrize(
    "line",
    [
        "{not json",
        "[1, 2]",
        json.dumps({"type": "launch"}),
        json.dumps({"type": "observe"}),
        json.dumps({"type": "observe", "objective": "violated"}),
        json.dumps({"type": "observe", "objective": True}),
        json.dumps({"type": "observe", "objective": 1.0, "constraints": [0.2]}),
        json.dumps({"type": "observe", "objective": "1.0"}),
        json.dumps({"type": "best_guess"}),
    ],
)
def test_asktell_rejects_bad_input_without_state_change(tmp_path, line):
    s = session(tmp_path)
    prompt = s.prompt()
    replies = s.handle(line)
    assert replies[0]["type"] == "error" and replies[1] == prompt
    assert len(s.state.objective_data) == 0 and s.log == []
    assert not (tmp_path / "datasets.json").exists()


def test_asktell_constraint_count_mismatch(tmp_path):
    s = session(tmp_path, problem="branin-circle", case="3")
    s.handle(json.dumps({"type": "observe", "objective": 10.0, "constraints": [-0.1]}))
    state_before = (len(s.state.objective_data), len(s.state.constraint_data[0]))
    replies = s.handle(json.dumps({"type": "observe", "objective": 3.0, "constraints": [-0.1, 0.2]}))
    assert replies[0]["type"] == "error" and "constraint" in replies[0]["msg"]
    assert (len(s.state.objective_data), len(s.state.constraint_data[0])) == state_before
    replies = s.handle(json.dumps({"type": "observe", "objective": 3.0, "constraints": ["satisfied"]}))
    assert replies[0]["type"] == "error"
    replies = s.handle(json.dumps({"type": "observe", "objective": 3.0, "constraints": ["violated"]}))
    assert replies[-1]["type"] == "suggest" and s.state.constraint_data[0].n_unstable == 1


def test_asktell_best_guess_request(tmp_path):
    s = session(tmp_path)
    s.handle(json.dumps({"type": "observe", "objective": 1.0}))
    reply = s.handle(json.dumps({"type": "best_guess"}))[0]
    assert reply["type"] == "best_guess" and len(reply["x"]) == 2
    assert all(0 <= v <= 1 for v in reply["x"])


def test_asktell_dataset_round_trip_refits_identically(tmp_path):
    s = session(tmp_path)
    for value in (1.0, "unstable", 0.7, "unstable"):
        s.handle(json.dumps({"type": "observe", "objective": value}))
    doc = json.loads((tmp_path / "datasets.json").read_text())
    data = HybridDataset.from_json(doc["objective"])
    spec = s.cfg.objective
    a = fit(data, spec.kernel, spec.noise, 1.2)
    b = fit(s.state.objective_data, spec.kernel, spec.noise, 1.2)
    np.testing.assert_array_equal(a.ep.mean, b.ep.mean)
    np.testing.assert_array_equal(a.ep.covariance, b.ep.covariance)
    assert a.ep.log_mass == b.ep.log_mass


def gardner_answer(x):
    from gpcrbo.benchmarks import gardner

    g = float(gardner([x])[0])
    return "unstable" if g > 1.5 else round(g, 6)


def record_session(tmp_path, n):
    """Drive the stdio entry point, answering with a fixed rule; return (inputs, outputs)."""
    inputs, outputs = [], []
    args = ["asktell", "--problem", "gardner", "--seed", "3", "--out", str(tmp_path), *FAST]
    # interactive: answer each suggestion as it arrives
    s = AskTellSession(cli._settings(cli.build_parser().parse_args(args)))
    outputs.append(s.prompt())
    for _ in range(n):
        line = json.dumps({"type": "observe", "objective": gardner_answer(outputs[-1]["x"])})
        inputs.append(line)
        outputs.extend(s.handle(line))
    inputs.append("quit")
    return args, inputs, [m for m in outputs if m["type"] == "suggest"]


def test_asktell_replay_reproduces_suggestions(tmp_path):
    args, inputs, live = record_session(tmp_path / "live", 4)
    replay_args = [a if a != str(tmp_path / "live") else str(tmp_path / "replay") for a in args]
    buf = io.StringIO()
    assert main(replay_args, stdin=io.StringIO("\n".join(inputs) + "\n"), stdout=buf) == 0
    replayed = [json.loads(l) for l in buf.getvalue().splitlines()]
    assert [m for m in replayed if m["type"] == "suggest"] == live
    assert replayed[-1]["type"] == "bye"
    assert (tmp_path / "live" / "datasets.json").read_text() == (tmp_path / "replay" / "datasets.json").read_text()


def test_asktell_eof_writes_summary(tmp_path):
    buf = io.StringIO()
    assert main(["asktell", "--problem", "gardner", "--out", str(tmp_path), *FAST], stdin=io.StringIO(""), stdout=buf) == 0
    assert json.loads(buf.getvalue().splitlines()[-1])["type"] == "bye"
    assert json.loads((tmp_path / "summary.json").read_text())["observations"] == 0
