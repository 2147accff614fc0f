import json

import pytest

from rwdre import cli
from rwdre.config import PRESETS, ConfigError, load, parse, preset_path
from rwdre.verify import CriterionResult


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return str(p)


def _preset_doc(name="m1"):
    return json.loads(preset_path(name).read_text())


@pytest.mark.parametrize("name", PRESETS)
def test_presets_validate(name):
    cfg = load(f"preset:{name}")
    assert cfg.seed == 42


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load("preset:nope")


def test_malformed_json_reports_position(tmp_path, capsys):
    path = _write(tmp_path, '{\n  "model": {,\n}')
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert f"{path}:2:" in err and "malformed JSON" in err


def test_parse_error_message_has_line_and_column():
    with pytest.raises(ConfigError, match=r"^x:1:2: malformed JSON"):
        parse("{oops}", "x")


def test_schema_violation_exits_2(tmp_path, capsys):
    doc = _preset_doc()
    doc["experiment"]["horizon"] = -5
    assert cli.main(["simulate", "--config", _write(tmp_path, doc), "--out", str(tmp_path)]) == 2
    assert "schema violation at experiment/horizon" in capsys.readouterr().err


def test_missing_seed_exits_2(tmp_path):
    doc = _preset_doc()
    del doc["experiment"]["seed"]
    assert cli.main(["simulate", "--config", _write(tmp_path, doc), "--out", str(tmp_path)]) == 2


def test_incompatible_model_exits_2(tmp_path):
    doc = _preset_doc("m2")
    doc["model"]["kernel"] = [[0.5, 0.5]]
    assert cli.main(["simulate", "--config", _write(tmp_path, doc), "--out", str(tmp_path)]) == 2


def test_bad_override_and_threads_exit_2(tmp_path):
    base = ["simulate", "--config", "preset:m1", "--out", str(tmp_path)]
    assert cli.main(base + ["--set", "novalue"]) == 2
    assert cli.main(base + ["--threads", "0"]) == 2
    assert cli.main(base + ["--seed", "-1"]) == 2


def _simulate(tmp_path, sub, *extra):
    out = tmp_path / sub
    argv = ["simulate", "--config", "preset:m2", "--out", str(out),
            "--set", "trajectories=12", "--set", "horizon=30", *extra]
    assert cli.main(argv) == 0
    return (out / "trajectories.csv").read_bytes()


def test_simulate_is_byte_identical(tmp_path):
    a = _simulate(tmp_path, "a")
    assert a == _simulate(tmp_path, "b")
    assert a != _simulate(tmp_path, "c", "--seed", "43")


def test_simulate_thread_invariance(tmp_path):
    assert _simulate(tmp_path, "t1") == _simulate(tmp_path, "t3", "--threads", "3")


def test_chunks_cover_runs_in_order():
    for n, k in ((10, 3), (2, 8), (1, 1)):
        blocks = cli._chunks(n, k)
        assert blocks[0][0] == 0 and sum(c for _, c in blocks) == n
        assert all(a + c == b for (a, c), (b, _) in zip(blocks, blocks[1:]))


def test_stats_missing_input_exits_2(tmp_path):
    assert cli.main(["stats", "--config", "preset:m1", "--out", str(tmp_path)]) == 2


def test_stats_unreadable_input_exits_1(tmp_path):
    argv = ["stats", "--config", "preset:m1", "--out", str(tmp_path),
            "--set", f"input={json.dumps(str(tmp_path / 'missing.csv'))}"]
    assert cli.main(argv) == 1


def test_stats_pipeline(tmp_path):
    _simulate(tmp_path, "sim")
    argv = ["stats", "--config", "preset:m2", "--out", str(tmp_path / "st"),
            "--set", f"input={json.dumps(str(tmp_path / 'sim' / 'trajectories.csv'))}"]
    assert cli.main(argv) == 0
    doc = json.loads((tmp_path / "st" / "summary.json").read_text())
    assert doc["n_runs"] == 12 and doc["horizon"] == 30


def test_oracle_and_mixing_outputs(tmp_path):
    assert cli.main(["oracle", "--config", "preset:m2", "--out", str(tmp_path), "--set", "t_grid=[1,2]"]) == 0
    doc = json.loads((tmp_path / "oracle.json").read_text())
    assert doc["irreducible"] and abs(doc["covariance"][0][0] - 1.026523) < 1e-5
    assert cli.main(["mixing", "--config", "preset:m2", "--out", str(tmp_path),
                     "--set", "coefficient=\"phi_tilde\"", "--set", "t=1"]) == 0
    mix = json.loads((tmp_path / "mixing.json").read_text())
    assert mix["mode"] == "exact" and abs(mix["value"] - 0.08) < 1e-9
    assert cli.main(["oracle", "--config", "preset:m1", "--out", str(tmp_path)]) == 0
    assert abs(json.loads((tmp_path / "oracle.json").read_text())["speed"][0] - 0.2) < 1e-12


def test_couple_condition_b(tmp_path):
    argv = ["couple", "--config", "preset:m2", "--out", str(tmp_path),
            "--set", "trajectories=6", "--set", "n=2", "--set", "horizon=10"]
    assert cli.main(argv) == 0
    lines = (tmp_path / "couple.csv").read_text().splitlines()
    assert lines[0].startswith("run_id,n,tau_n") and len(lines) == 7
    assert all(line.split(",")[2] == "2" for line in lines[1:])


def test_couple_condition_a_needs_eps(tmp_path):
    argv = ["couple", "--config", "preset:m2", "--out", str(tmp_path), "--set", "condition=\"a\"",
            "--set", "trajectories=2"]
    assert cli.main(argv) == 2


def test_verify_failure_exits_3(tmp_path, monkeypatch):
    import rwdre.verify as verify

    monkeypatch.setattr(verify, "run_suite",
                        lambda *a, **k: [CriterionResult(1, "forced", False)])
    assert cli.main(["verify", "--config", "preset:m2", "--out", str(tmp_path)]) == 3
    assert json.loads((tmp_path / "verify.json").read_text())[0]["passed"] is False


def test_verify_quick_subset_passes(tmp_path):
    argv = ["verify", "--config", "preset:m2", "--out", str(tmp_path),
            "--set", "scale=\"quick\"", "--set", "criteria=[5,7,10]"]
    assert cli.main(argv) == 0
    rows = json.loads((tmp_path / "verify.json").read_text())
    assert [r["number"] for r in rows] == [5, 7, 10]
