import json
import math

import pytest

from bdq.cli import main
from bdq.config import EXPERIMENTS, ConfigError, parse_config, parse_number

MINIMAL = "[run]\nexperiment = validate-weight\n"


def test_defaults_fill_every_field():
    cfg = parse_config(MINIMAL)
    assert cfg.lattice["L"] == 8 and cfg.interaction["kind"] == "phi4"
    assert cfg.optimizer["n_eval"] == 4000


@pytest.mark.parametrize("text,value", [("2*pi", 2 * math.pi), ("pi/2", math.pi / 2), ("1e-3", 1e-3), ("-pi", -math.pi)])
def test_parse_number(text, value):
    assert parse_number(text) == pytest.approx(value)


def test_unknown_key_has_location():
    with pytest.raises(ConfigError) as e:
        parse_config(MINIMAL + "[lattice]\nL = 8\nLx = 3\n")
    assert (e.value.line, e.value.column) == (5, 1)


def test_unknown_section_and_bad_value():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(MINIMAL + "[extra]\nx = 1\n")
    with pytest.raises(ConfigError, match="bad value") as e:
        parse_config(MINIMAL + "[lattice]\nL = eight\n")
    assert e.value.line == 4


def test_range_checks():
    with pytest.raises(ConfigError, match="power of two"):
        parse_config(MINIMAL + "[lattice]\nL = 12\n")
    with pytest.raises(ConfigError, match="8 pi"):
        parse_config(MINIMAL + "[interaction]\nkind = exponential\nbeta2 = 9*pi\n")


def test_missing_or_unknown_experiment():
    with pytest.raises(ConfigError, match="missing"):
        parse_config("[lattice]\nL = 8\n")
    with pytest.raises(ConfigError, match="unknown experiment"):
        parse_config("[run]\nexperiment = nope\n")


def test_twelve_experiments():
    assert len(EXPERIMENTS) == 12


def test_validate_config_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text(MINIMAL, encoding="utf-8")
    assert main(["validate-config", str(good)]) == 0
    bad = tmp_path / "bad.ini"
    bad.write_text(MINIMAL + "[lattice]\nfoo = 1\n", encoding="utf-8")
    assert main(["validate-config", str(bad)]) == 2
    assert "bad.ini:4:1" in capsys.readouterr().err


def test_run_writes_artifacts_and_report(tmp_path):
    cfg = tmp_path / "w.ini"
    cfg.write_text(MINIMAL + "[params]\nweight_gamma = 0.25\n", encoding="utf-8")
    out = tmp_path / "runs"
    assert main(["run", str(cfg), "--output", str(out)]) == 0
    (run,) = list(out.iterdir())
    man = json.loads((run / "manifest.json").read_text())
    assert man["status"] == "complete" and man["exit_code"] == 0
    assert {"checks.csv", "sweep.csv", "weights.csv", "data_dictionary.txt"} <= {p.name for p in run.iterdir()}
    assert not list(run.glob("*.tmp"))
    rep = tmp_path / "rep"
    assert main(["report", str(out), "--output", str(rep)]) == 0
    assert (rep / "sweeps_long.csv").read_text().startswith("experiment,parameter,value,se")
    assert len((rep / "summary.csv").read_text().splitlines()) == 2


def test_report_flags_incomplete(tmp_path):
    d = tmp_path / "r1"
    d.mkdir()
    (d / "manifest.json").write_text(json.dumps({"status": "incomplete", "config": {"experiment": "gff-check"}}))
    assert main(["report", str(d), "--output", str(tmp_path)]) == 1
    assert "incomplete" in (tmp_path / "summary.txt").read_text()
    assert main(["report", str(tmp_path / "missing"), "--output", str(tmp_path)]) == 1


def test_failing_run_exits_one(tmp_path):
    cfg = tmp_path / "w.ini"
    cfg.write_text(MINIMAL + "[params]\nweight_gamma = 2\n", encoding="utf-8")
    assert main(["run", str(cfg), "--output", str(tmp_path / "o")]) == 1


def test_semantic_config_error_exits_two(tmp_path):
    cfg = tmp_path / "e.ini"
    cfg.write_text("[run]\nexperiment = exp-model\n", encoding="utf-8")
    assert main(["run", str(cfg), "--output", str(tmp_path / "o")]) == 2
