import csv
import io
import json

import pytest

from artifact import xcli
from artifact.xcli import Check, ExperimentConfig, UsageError


def test_check_semantics():
    assert Check("s", "a", 1e-11, 0, 1e-10, "identity").passed
    assert not Check("s", "a", -1e-9, 0, 1e-10, "identity").passed
    assert Check("s", "b", 0.5, 0.4, 0.11).passed
    assert not Check("s", "b", 0.5, 0.4, 0.0).passed
    assert not Check("s", "c", 1.0, 1.0, 0.0, "strict").passed
    assert not Check("s", "d", float("nan"), 1.0, 0.0).passed
    assert "vacuous" in Check("s", "e", 0.1, 3.0, 0).note
    assert Check("s", "f", 0.1, 0.5, 0).note == ""


def test_config_text_parsing():
    cfg = ExperimentConfig.from_text("n = 3  # qubits\nt = 2\nplacement = 1,2,1\n")
    assert (cfg.n, cfg.t, cfg.placement_tuple) == (3, 2, (1, 2, 1))
    with_header = ExperimentConfig.from_text("[run]\nseed = 0x10\n")
    assert with_header.seed == 16


@pytest.mark.parametrize("text,field", [("bogus = 1", "bogus"), ("n = two", "n"), ("suite = nope", "suite"),
                                        ("placement = 1,2", "placement"), ("K = 1", "K"),
                                        ("oracle_a = X", "oracle_a")])
def test_config_errors_name_the_field(text, field):
    with pytest.raises(UsageError, match=field):
        ExperimentConfig.from_text(text)


def test_defaults_roundtrip():
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_text(cfg.dumps()) == cfg


def test_print_defaults(capsys):
    assert xcli.main(["--print-defaults"]) == 0
    assert "seed = 0" in capsys.readouterr().out


def test_usage_errors(tmp_path, capsys):
    assert xcli.main([]) == 2
    assert xcli.main(["verify", "--suite", "nope"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_field = 1\n")
    assert xcli.main(["verify", "--config", str(bad)]) == 2
    assert "unknown_field" in capsys.readouterr().err
    assert xcli.main(["verify", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_capacity_error_exit_code(capsys):
    assert xcli.main(["distinguish", "-n", "4", "-t", "2"]) == 3
    assert "capacity" in capsys.readouterr().err


def test_verify_twirls_report(tmp_path):
    out = tmp_path / "r.json"
    assert xcli.main(["verify", "--suite", "twirls", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["schema"] == 1 and rep["pass"]
    assert rep["config"]["suite"] == "twirls"
    assert {"measured", "bound", "tolerance", "pass"} <= set(rep["checks"][0])
    assert rep["wall_clock_s"] >= 0 and rep["version"]


def test_distinguish_examples():
    base = dict(experiment="distinguish", n=2, t=2)
    r = xcli.cmd_distinguish(ExperimentConfig(**base, oracle_a="V", oracle_b="pf-exact"))
    assert r["pass"] and r["checks"][0]["measured"] <= 0.8
    r = xcli.cmd_distinguish(ExperimentConfig(**base, oracle_a="V", oracle_b="V"))
    assert r["checks"][0]["measured"] < 1e-12
    r = xcli.cmd_distinguish(ExperimentConfig(**base, oracle_a="V", oracle_b="haar-mc", K=4096))
    assert r["pass"] and r["standard_error"] > 0


def test_parallel_jobs_keep_order():
    funcs = [xcli.check_twirls, xcli.check_v_partial_isometry, xcli.check_truncated_isometries]
    serial = xcli.run_checks(funcs, ExperimentConfig(jobs=1))
    threaded = xcli.run_checks(funcs, ExperimentConfig(jobs=3))
    assert [c.name for c in serial] == [c.name for c in threaded]
    assert [c.measured for c in serial] == pytest.approx([c.measured for c in threaded], abs=1e-15)


def _write_report(path, checks):
    rep = {"schema": 1, "version": "x", "config": {}, "checks": [c.record() for c in checks],
           "pass": all(c.passed for c in checks)}
    path.write_text(json.dumps(rep))
    return str(path)


def test_report_merge(tmp_path, capsys):
    a = _write_report(tmp_path / "a.json", [Check("z", "b", 0.1, 1, 0), Check("a", "x", 0.0, 0, 1e-10, "identity")])
    b = _write_report(tmp_path / "b.json", [Check("m", "q", 2.0, 1.0, 0)])
    single = xcli.cmd_report([a])
    assert [(c["suite"], c["name"]) for c in single["checks"]] == [("a", "x"), ("z", "b")]
    merged = xcli.cmd_report([a, b])
    assert [(c["suite"], c["name"]) for c in merged["checks"]] == [("a", "x"), ("m", "q"), ("z", "b")]
    assert merged["pass_rate"] == pytest.approx(0.5)
    assert xcli.main(["report", a, b, "--format", "csv"]) == 1
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert tuple(rows[0]) == xcli.COLUMNS
    assert len(rows) == 4


def test_report_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema": 1,\n "checks": [\n')
    with pytest.raises(UsageError, match=r"bad.json:\d+"):
        xcli.load_report(str(bad))
    wrong = tmp_path / "wrong.json"
    wrong.write_text('{"schema": 7, "checks": []}')
    with pytest.raises(UsageError, match="wrong.json"):
        xcli.load_report(str(wrong))
    assert xcli.main(["report", str(bad)]) == 2
