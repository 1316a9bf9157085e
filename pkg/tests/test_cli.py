import json

import numpy as np
import pytest
import yaml

from homodyne_qed.cli import (
    ConfigError, RunConfig, dumps_json, fmt, load_config, main, make_params, make_state,
    parse_complex, parse_record, read_table, write_table)
from homodyne_qed.conditional import eigenvalue_weights
from homodyne_qed.hilbert import SystemParams


def run(tmp_path, command, cfg: dict, *extra):
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    out = tmp_path / "out"
    code = main([command, "--config", str(path), "--output", str(out), *extra])
    return code, out


def test_defaults_load():
    cfg = load_config(None)
    assert isinstance(cfg, RunConfig)
    assert make_params(cfg.params).n_fock == 40


@pytest.mark.parametrize("text", ["params: {gg: 1}", "bogus: 1", "params: {g: abc}", "[1, 2"])
def test_bad_config_rejected(tmp_path, text):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file(tmp_path, capsys):
    assert main(["verify", "--config", str(tmp_path / "none.yaml")]) == 2


def test_value_parsers():
    assert parse_complex({"re": 0.5, "im": -1}) == 0.5 - 1j
    assert parse_complex(2) == 2
    with pytest.raises(ConfigError):
        parse_complex("x")
    assert parse_record([1, {"k": 2}]) == (1, 2)
    with pytest.raises(ConfigError):
        parse_record([3])
    p = SystemParams(g=1.0, E=0.5, n_fock=40)
    rho = make_state({"coherent": {"re": 0.5, "im": 0}, "atom": "+"}, p)
    assert np.trace(rho).real == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        make_state("thermal", p)


@pytest.mark.parametrize("fmt_name", ["csv", "json"])
def test_table_roundtrip(tmp_path, fmt_name):
    rows = [[1, 0.1 + 0.2j, 1 / 3, "pass"], [2, -1e-300, np.pi, "fail"]]
    path = write_table(tmp_path / "t", ["i", "z", "x", "s"], rows, fmt_name)
    cols, back = read_table(path)
    assert cols[0] == "i"
    flat = [x for r in back for x in r]
    assert 1 / 3 in flat and np.pi in flat and -1e-300 in flat


def test_fmt_is_lossless():
    for x in (0.1, 1 / 3, 1e-300, np.nextafter(1.0, 2.0)):
        assert float(fmt(x)) == x
    assert json.loads(dumps_json({"z": 1 + 2j})) == {"z": {"re": 1.0, "im": 2.0}}


def test_verify_default_passes(tmp_path):
    code, out = run(tmp_path, "verify", {})
    assert code == 0
    cols, rows = read_table(out / "verify.csv")
    assert cols == ["check", "case", "residual", "tolerance", "status"]
    assert {r[0] for r in rows} >= {"theorem1", "theorem2", "corollary", "lemma1", "lemma2",
                                    "real_beta", "ratio"}
    assert all(r[4] == "pass" for r in rows)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "verify"


def test_verify_zero_tolerance_fails(tmp_path):
    code, out = run(tmp_path, "verify", {"verify": {"tolerance": 0, "checks": ["theorem1", "lemma2"]}})
    assert code == 1
    _, rows = read_table(out / "verify.csv")
    assert rows and all(r[4] == "fail" for r in rows)


def test_verify_truncation_exit(tmp_path, capsys):
    code, _ = run(tmp_path, "verify", {"params": {"g": 10, "E": 3, "n_fock": 100}})
    assert code == 3
    assert "check theorem1" in capsys.readouterr().err


def test_evolve_zero_duration(tmp_path):
    code, out = run(tmp_path, "evolve", {"evolve": {"t_total": 0.0}})
    assert code == 0
    cols, rows = read_table(out / "evolve.csv")
    assert len(rows) == 1 and rows[0][0] == 0.0 and rows[0][1] == pytest.approx(1.0)
    p = make_params(load_config(None).params)
    assert rows[0][cols.index("a_re")] == pytest.approx(p.alpha.real, abs=1e-8)


def test_sample_is_byte_identical(tmp_path):
    cfg = {"sample": {"n_traj": 4, "t_total": 0.3}}
    code, out = run(tmp_path / "a", "sample", cfg, "--seed", "5")
    assert code == 0
    first = (out / "records.json").read_bytes()
    code, out = run(tmp_path / "b", "sample", cfg, "--seed", "5")
    assert (out / "records.json").read_bytes() == first
    assert (out / "sample.csv").read_bytes() == (tmp_path / "a" / "out" / "sample.csv").read_bytes()
    recs = json.loads(first)
    assert all(set(e) == {"k", "t"} for r in recs for e in r["record"])


def test_conditional_ratio_row(tmp_path):
    cfg = {"params": {"beta": {"re": 0, "im": 0.5}},
           "conditional": {"record": [2, 2], "dt_total": 0.4, "ratio_form": "corrected"}}
    code, out = run(tmp_path, "conditional", cfg, "--format", "json")
    assert code == 0
    cols, rows = read_table(out / "conditional.json")
    row = dict(zip(cols, rows[0]))
    p = make_params(load_config(None).params).replace(beta=0.5j)
    l1, l2 = eigenvalue_weights((2, 2), 0.4, p, "corrected")
    assert row["lambda1"] == pytest.approx(l1, rel=1e-10)
    assert row["lambda2"] == pytest.approx(l2, rel=1e-10)
    assert row["ratio_formula"] == pytest.approx(row["ratio_block"], rel=1e-10)


def test_conditional_record_file(tmp_path):
    (tmp_path / "rec.json").write_text(json.dumps([{"k": 1, "t": 0.1}, {"k": 2, "t": 0.2}]))
    code, out = run(tmp_path, "conditional", {"conditional": {"record_file": "rec.json"}})
    assert code == 0
    _, rows = read_table(out / "conditional.csv")
    assert rows[0][0] == 2
    code, _ = run(tmp_path, "conditional", {"conditional": {"record_file": "missing.json"}})
    assert code == 2


def test_sme_outputs(tmp_path):
    cfg = {"sme": {"n_traj": 2, "t_total": 0.1, "stride": 10}}
    code, out = run(tmp_path, "sme", cfg)
    assert code == 0
    _, mean = read_table(out / "sme_mean.csv")
    _, cur = read_table(out / "photocurrent.csv")
    assert len(mean) == 3 and len(cur) == 2 * 20
