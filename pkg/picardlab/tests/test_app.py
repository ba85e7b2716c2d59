import json

import pandas as pd
import pytest

from app import main, parse_params
from backend.errors import InvalidArgument
from backend.models import ExperimentConfig
from backend.services import config_hash, load_config


REMARK7 = {
    "generator": {"name": "remark7"},
    "terminal": {"name": "constant"},
    "grid": {"T": 10.0, "steps": 50, "horizon": "truncated_infinite"},
    "ensemble": {"paths": 1000, "seed": 0},
}


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def run(capsys, argv):
    code = main([str(item) for item in argv])
    return code, json.loads(capsys.readouterr().out)


def test_parse_params():
    assert parse_params(["theta=0.5", "table=[[0, 0], [1, 1]]"]) == {"theta": 0.5, "table": [[0, 0], [1, 1]]}
    with pytest.raises(InvalidArgument):
        parse_params(["theta"])
    with pytest.raises(InvalidArgument):
        parse_params(["theta=half"])


def test_zoo_list(capsys):
    assert main(["zoo-list"]) == 0
    table = capsys.readouterr().out
    assert "example1" in table and "remark7" in table
    assert "xloglog" in table and "abs_capped" in table
    assert main(["zoo-list", "--json"]) == 0
    listing = json.loads(capsys.readouterr().out)
    assert {"zero", "linear", "example1", "example2", "remark7"} <= {row["name"] for row in listing["generators"]}
    assert {row["name"] for row in listing["moduli"]} == {"linear", "power", "xlogx", "xloglog", "table"}
    assert [row["name"] for row in listing["terminals"]] == ["constant", "brownian", "abs_capped"]


def test_remark7_solve(tmp_path, capsys):
    config = write_config(tmp_path, REMARK7)
    out = tmp_path / "out"
    code, summary = run(capsys, ["--output-dir", out, "solve", "--config", config])
    assert code == 0
    assert summary["y0"] == [1.0]
    assert summary["convergedAt"] == 1
    assert summary["maxResidualRms"] == 0.0
    frame = pd.read_csv(out / "solution_summary.csv", comment="#")
    assert (frame["meanY"] == 1.0).all()
    assert (frame["meanAbsZ"] == 0.0).all()
    horizon = json.loads((out / "horizon.json").read_text(encoding="utf-8"))
    assert horizon["horizon"]["kind"] == "truncated_infinite"


def test_outputs_are_byte_identical_across_thread_counts(tmp_path, capsys):
    config = write_config(tmp_path, {**REMARK7, "terminal": {"name": "brownian"}, "generator": {"name": "zero"}, "grid": {"T": 1.0, "steps": 20}, "ensemble": {"paths": 3000, "seed": 9}})
    outputs = []
    for threads in (1, 4):
        out = tmp_path / f"threads{threads}"
        code, _ = run(capsys, ["--output-dir", out, "--threads", threads, "solve", "--config", config])
        assert code == 0
        outputs.append(out)
    names = sorted(path.name for path in outputs[0].iterdir())
    assert names == sorted(path.name for path in outputs[1].iterdir())
    for name in names:
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()


def test_every_output_carries_the_config_hash(tmp_path, capsys):
    config = write_config(tmp_path, {**REMARK7, "solver": {"estimates": True}})
    out = tmp_path / "out"
    code, summary = run(capsys, ["--output-dir", out, "solve", "--config", config])
    assert code == 0
    digest = config_hash(load_config(config))
    assert "estimates.csv" in summary["files"]
    for name in summary["files"]:
        path = out / name
        if path.suffix == ".csv":
            assert path.read_text(encoding="utf-8").splitlines()[0] == f"# config-sha256: {digest}"
        elif name != "config.json":
            assert json.loads(path.read_text(encoding="utf-8"))["configHash"] == digest
    resolved = ExperimentConfig.model_validate(json.loads((out / "config.json").read_text(encoding="utf-8")))
    assert config_hash(resolved) == digest
    table = pd.read_csv(out / "estimates.csv", comment="#")
    assert table["estimate"].tolist() == ["prop1", "prop2", "prop1", "prop2"]


def test_malformed_config_names_the_field(tmp_path, capsys):
    config = write_config(tmp_path, {"grid": {"steps": 0}, "gird": {}})
    code, payload = run(capsys, ["--output-dir", tmp_path / "out", "solve", "--config", config])
    assert code == 2
    assert payload["error"] == "invalid-argument"
    assert "grid.steps" in payload["fields"]
    assert "gird" in payload["fields"]


def test_missing_config_is_an_invalid_argument(tmp_path, capsys):
    code, payload = run(capsys, ["check", "--config", tmp_path / "absent.json"])
    assert code == 2
    assert payload["error"] == "invalid-argument"


def test_divergence_exits_with_one(tmp_path, capsys):
    config = write_config(tmp_path, {"generator": {"name": "linear", "params": {"a": 10.0}}, "ensemble": {"paths": 100}})
    code, payload = run(capsys, ["--output-dir", tmp_path / "out", "solve", "--config", config])
    assert code == 1
    assert payload["error"] == "divergence-reported"
    assert len(payload["distances"]) == 4


def test_check_reports_a_factor_two_violation(tmp_path, capsys):
    payload = {
        "generator": {"name": "linear", "params": {"a": 2.0}},
        "check": {
            "samples": 2000,
            "h4": {
                "alpha": {"coef": 1.0},
                "beta": {"coef": 0.0},
                "weight": {"coef": 1.0},
                "kappa": {"name": "linear", "params": {"c": 1.0}},
            },
        },
    }
    out = tmp_path / "out"
    code, summary = run(capsys, ["--output-dir", out, "check", "--config", write_config(tmp_path, payload)])
    assert code == 0
    assert summary["status"] == "fail"
    assert summary["witnesses"] >= 1
    assert (out / "hypotheses.json").exists()


def test_certify_example1(tmp_path, capsys):
    payload = {
        "generator": {"name": "example1"},
        "terminal": {"name": "abs_capped"},
        "ledger": {"hatMP": 1.0, "barMP": 1.0},
        "certify": {"momentPaths": 2000},
    }
    out = tmp_path / "out"
    code, summary = run(capsys, ["--output-dir", out, "certify", "--config", write_config(tmp_path, payload)])
    assert code == 0
    assert summary["intervals"] >= 1
    assert summary["majorantConverged"]
    certificate = json.loads((out / "certificate.json").read_text(encoding="utf-8"))
    assert all(slack["abSlack"] >= 0.0 and slack["bSlack"] >= 0.0 for slack in certificate["partitionSlack"])
    majorant = pd.read_csv(out / "majorant.csv", comment="#")
    assert majorant.columns[0] == "t"


def test_modulus_diagnose(tmp_path, capsys):
    out = tmp_path / "out"
    code, summary = run(capsys, ["--output-dir", out, "modulus", "--name", "power", "--param", "theta=0.5"])
    assert code == 0
    assert summary["classification"] == "convergent-likely"
    trace = pd.read_csv(out / "osgood.csv", comment="#")
    assert trace["integral"].iloc[-1] == pytest.approx(2.0, rel=1e-3)


def test_modulus_transform_and_concavify(tmp_path, capsys):
    out = tmp_path / "out"
    code, summary = run(capsys, ["--output-dir", out, "modulus", "--name", "power", "--param", "theta=0.5", "--action", "transform"])
    assert code == 0
    assert summary["midpointConcavityViolation"] <= 1e-12
    assert summary["chordBound"]["holds"]
    code, summary = run(capsys, ["--output-dir", out, "modulus", "--name", "power", "--action", "concavify"])
    assert code == 0
    assert summary["withinFactorTwo"]
    assert (out / "concavify.csv").exists()
