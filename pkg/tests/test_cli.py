import json

import pytest

from killedmkv.cli import EXIT_CONFIG, EXIT_INVALID, main
from killedmkv.config import ConfigError, bundled, config_hash, load_scenario, scenario_from_dict


def test_bundled_scenarios_load():
    for name in ("lq", "conditional_exit", "mean_interaction", "gaussian_bridge"):
        s, opts, cfg, h = load_scenario(bundled(name))
        assert len(h) == 16 and s.n_particles > 0


def test_unknown_key_position(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{\n  "T": 1.0,\n  "typo": 3\n}\n')
    with pytest.raises(ConfigError, match=r"unknown key 'typo' \(line 3, column 3\)"):
        load_scenario(p)
    p.write_text('{"T": 1.0,,}')
    with pytest.raises(ConfigError, match="line 1"):
        load_scenario(p)
    with pytest.raises(ConfigError, match="domain.zzz"):
        scenario_from_dict({"domain": {"zzz": 1}})


def test_hash_is_canonical():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


def test_exit_codes(tmp_path, capsys):
    assert main(["simulate", "--scenario", "bad_interval", "--out", str(tmp_path)]) == EXIT_INVALID
    assert "error InvalidScenario: " in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert main(["simulate", "--scenario", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["oracle", "riccati"]) == 0
    assert "P_0 = 0.5" in capsys.readouterr().out


def _run(args, out):
    assert main(args + ["--out", str(out)]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_threads_do_not_change_outputs(tmp_path):
    base = ["solve", "--scenario", "conditional_exit", "--particles", "2000", "--steps", "20"]
    a = _run(base + ["--threads", "1"], tmp_path / "a")
    b = _run(base + ["--threads", "8"], tmp_path / "b")
    assert a == b and set(a) == {"trace.csv", "control.csv", "flow.csv", "adjoint.csv", "certificates.csv"}
    first = a["trace.csv"].decode().splitlines()[0]
    assert first.startswith("# config_hash=") and "seed=" in first


def test_verify_manifest(tmp_path):
    code = main(["verify", "--scenario", "lq", "--particles", "4000", "--steps", "20", "--out", str(tmp_path)])
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["schema"] == "killedmkv-verify/1"
    names = [c["name"] for c in m["checks"]]
    assert "metric_sandwich" in names and "gateaux" in names and "mfg_exploitability" in names
    assert code == (0 if m["all_passed"] else 1)
