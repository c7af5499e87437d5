import csv
import json

import pytest
from click.testing import CliRunner

from xtransport.cli import (
    CRITERIA,
    ConfigError,
    ExperimentConfig,
    _Runner,
    criterion_lines,
    main,
    run_experiment,
)

# small and quick: a coarse rate estimate is enough to exercise the plumbing
FAST = {"calibration_rse": 0.1, "n": 24}


def test_config_defaults_follow_the_experiment():
    assert ExperimentConfig(experiment="bismut_embed").A.kind == "lifetime_in"
    assert ExperimentConfig(experiment="ito_embed").A.kind == "lifetime_gt"
    assert ExperimentConfig(experiment="lemma_suite").replicates == 1000
    assert ExperimentConfig(experiment="ito_embed").replicates == 2000


@pytest.mark.parametrize("bad", [
    {"experiment": "nope"},
    {"seed": -1},
    {"delta": 0.0},
    {"n": 0},
    {"mode": "levy"},
    {"experiment": "ito_embed", "mode": "random_walk"},
    {"workers": 0},
    {"alpha": 1.5},
    {"predicate": {"kind": "shape", "a": 1.0}},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig(**bad)


def test_config_file_and_overrides(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"experiment": "poisson_check", "seed": 3, "mode": "random_walk"}))
    cfg = ExperimentConfig.load(f, seed=9, n=None)
    assert cfg.seed == 9 and cfg.mode == "random_walk" and cfg.experiment == "poisson_check"
    f.write_text(json.dumps({"colour": "red"}))
    with pytest.raises(ConfigError):
        ExperimentConfig.load(f)


def test_run_remark_writes_outputs(tmp_path):
    res = CliRunner().invoke(main, ["run", "--experiment", "remark_r8", "--output", str(tmp_path)])
    assert res.exit_code == 0, res.output
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["passed"] and summary["experiment"] == "remark_r8"
    assert (tmp_path / "replicates.csv").exists()
    assert "PASS" in res.output


def test_bad_option_is_a_usage_error(tmp_path):
    res = CliRunner().invoke(main, ["run", "--experiment", "ito_embed", "--mode", "random_walk",
                                    "--output", str(tmp_path)])
    assert res.exit_code != 0
    assert "random_walk" in res.output


def _ito_csv(tmp_path, name, workers):
    cfg = ExperimentConfig(experiment="ito_embed", seed=4, workers=workers, ecdf=True, **FAST)
    out = run_experiment(cfg, _Runner()).write(tmp_path / name, ecdf_files=True)
    return out


def test_runs_are_reproducible_across_worker_counts(tmp_path):
    a = _ito_csv(tmp_path, "a", 1)
    b = _ito_csv(tmp_path, "b", 2)
    assert (a / "replicates.csv").read_bytes() == (b / "replicates.csv").read_bytes()
    with open(a / "replicates.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) >= FAST["n"]
    assert {"T", "origin_lifetime", "backward_local_time"} <= set(rows[0])
    assert sorted(p.name for p in a.glob("ecdf_*.csv"))


def test_criterion_lines_cover_all_criteria():
    assert sorted(CRITERIA) == list(range(1, 11))
    cfg = ExperimentConfig(experiment="remark_r8")
    lines = criterion_lines({"remark_r8": run_experiment(cfg, _Runner())})
    assert [n for n, _, _ in lines] == [3]
    assert lines[0][1] and "criterion  3 PASS" in lines[0][2]
