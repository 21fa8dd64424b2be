import csv
import hashlib
import json

import numpy as np
import pytest

from cdevolve import escalate
from cdevolve.cli import ExperimentConfig, ConfigError, main
from cdevolve.genome import Genome

SMALL = {"master_seed": 5, "evolution": {"islands": 2, "population": 3, "generations": 3, "migration_interval": 1}}


def write_config(path, **overrides):
    cfg = {**SMALL, **overrides}
    path.write_text(json.dumps(cfg))
    return path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "config.json", output_dir="out")
    assert main(["run", "--config", str(cfg)]) == 0
    return root


def test_run_writes_files(run_dir):
    names = sorted(p.name for p in (run_dir / "out").iterdir())
    assert names == ["archive.json", "best.genome.json", "manifest.json", "summary.csv", "trajectory.jsonl"]
    m = json.loads((run_dir / "out" / "manifest.json").read_text())
    assert m["master_seed"] == 5 and m["engine_version"] and len(m["config_hash"]) == 64
    assert len((run_dir / "out" / "trajectory.jsonl").read_text().splitlines()) == 18


def test_run_reproducible(run_dir, tmp_path):
    assert main(["run", "--config", str(run_dir / "config.json"), "--out", str(tmp_path / "again")]) == 0
    for name in ("trajectory.jsonl", "archive.json", "summary.csv", "best.genome.json"):
        assert digest(run_dir / "out" / name) == digest(tmp_path / "again" / name)
    a = json.loads((run_dir / "out" / "manifest.json").read_text())
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())
    a.pop("created"), b.pop("created")
    assert a == b


def test_refuses_non_empty_output(run_dir):
    assert main(["run", "--config", str(run_dir / "config.json")]) == 4


def test_missing_master_seed(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"evolution": {}}))
    assert main(["run", "--config", str(p)]) == 2
    with pytest.raises(ConfigError, match="master_seed"):
        ExperimentConfig.from_dict({})


@pytest.mark.parametrize("bad", [{"master_seed": 1, "bogus": 1},
                                 {"master_seed": 1, "evolution": {"islands": 0}},
                                 {"master_seed": 1, "contract": {"seeds": [1]}},
                                 {"master_seed": "x"}])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_replay_verifies(run_dir):
    out = run_dir / "out"
    assert main(["replay", "--config", str(run_dir / "config.json"), "--genome", str(out / "best.genome.json"),
                 "--verify"]) == 0


def test_replay_other_seed_fails_verification(run_dir, tmp_path):
    other = write_config(tmp_path / "other.json", master_seed=6)
    out = run_dir / "out"
    assert main(["replay", "--config", str(other), "--genome", str(out / "best.genome.json"),
                 "--trajectory", str(out / "trajectory.jsonl"), "--verify"]) == 3


def test_replay_invalid_genome(run_dir, tmp_path, capsys):
    g = json.loads((run_dir / "out" / "best.genome.json").read_text())
    g["split"]["folds"] = 1
    g["data_ops"]["feature_mask"] = [False] * len(g["data_ops"]["feature_mask"])
    p = tmp_path / "bad.genome.json"
    p.write_text(json.dumps(g))
    assert main(["replay", "--config", str(run_dir / "config.json"), "--genome", str(p)]) == 2
    err = capsys.readouterr().err
    assert "feature_mask empty" in err and "fold count" in err


def test_ablate_files(tmp_path):
    cfg = write_config(tmp_path / "c.json", ablation={"n_seeds": 2},
                       evolution={"islands": 2, "population": 3, "generations": 2, "migration_interval": 1})
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "abl")]) == 0
    traj = sorted((tmp_path / "abl").glob("trajectory_*_*.jsonl"))
    assert len(traj) == 4 * 2


def _batch(path, X, y=None):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k}" for k in range(X.shape[1])] + (["label"] if y is not None else []))
        for k, row in enumerate(X):
            w.writerow([repr(float(v)) for v in row] + ([repr(float(y[k]))] if y is not None else []))


def test_screen_infinite_threshold(run_dir, ds, tmp_path):
    cfg = ExperimentConfig.load(run_dir / "config.json")
    g = Genome.from_json((run_dir / "out" / "best.genome.json").read_text())
    ens = escalate.SeedEnsemble(g, ds, cfg.make_contract().seeds)
    idx = ens.train_idx[:25]
    _batch(tmp_path / "batch.csv", ds.X[idx], ds.y[idx])
    assert main(["screen", "--config", str(run_dir / "config.json"), "--batch", str(tmp_path / "batch.csv"),
                 "--out", str(tmp_path / "scr"), "--top-k", "5"]) == 0
    rep = json.loads((tmp_path / "scr" / "screen_report.json").read_text())
    assert rep["kpis"]["escalation_rate"] == 0.0
    assert rep["roi"] == escalate.roi(escalate.RoiInputs(**rep["roi_inputs"]))
    rows = list(csv.DictReader((tmp_path / "scr" / "screen_decisions.csv").open()))
    assert len(rows) == 25 and {r["decision"] for r in rows} == {"accept"}


def test_screen_zero_threshold_escalates(run_dir, ds, tmp_path):
    _batch(tmp_path / "batch.csv", ds.X[::20])
    assert main(["screen", "--config", str(run_dir / "config.json"), "--batch", str(tmp_path / "batch.csv"),
                 "--out", str(tmp_path / "scr"), "--sigma-max", "0"]) == 0
    rep = json.loads((tmp_path / "scr" / "screen_report.json").read_text())
    assert rep["kpis"]["escalation_rate"] > 0.5


def test_screen_malformed_batch(run_dir, tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("x0,x1\n0.1,0.2\n0.3,zz\n")
    assert main(["screen", "--config", str(run_dir / "config.json"), "--batch", str(p),
                 "--out", str(tmp_path / "scr")]) == 2
    assert "row 3" in capsys.readouterr().err


def test_generate_round_trip(tmp_path, ds):
    cfg = write_config(tmp_path / "c.json")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    cfg2 = write_config(tmp_path / "c2.json", dataset={"csv": "data/dataset.csv", "card": "data/dataset.card.json"})
    assert ExperimentConfig.load(cfg2).dataset().hash() == ds.hash()
