import json
import re

import numpy as np
import pytest

from dualticket.cli import main
from dualticket.errors import ConfigurationError
from dualticket.experiment import (RunResult, aggregate, config_from_dict, cost_epochs, dump_config, emit_report,
                                   format_table, load_results, mean_std, parse_config, run_matrix,
                                   total_cost_epochs)
from dualticket.mask import SparsityPlan, random_mask, save_mask

MINIMAL = """\
network:
  input_shape: [4]
  layers:
    - {kind: dense, out_features: 16}
    - {kind: relu}
    - {kind: dense, out_features: 12}
    - {kind: relu}
    - {kind: dense, out_features: 3}
dataset: {kind: blobs, n_per_class: 30, classes: 3, noise: 0.5, features: 4}
"""

TINY = MINIMAL + """\
ratios: [0.9]
seeds: [0]
finetune: {epochs: 2, batch_size: 16, schedule: [[0, 0.05]], warmup: [1, 0.01]}
pretrain_iter: {epochs: 1, schedule: [[0, 0.05]]}
cycles: 2
rst: {eta: 0.25, v_eta: 1, v_s: 4, batch_size: 16}
rst_iter: {eta: 0.5, v_eta: 1, v_s: 2, batch_size: 16}
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def result(strategy, ratio, seed, acc, epochs=None):
    epochs = epochs or [{"epoch": 0, "lr": 0.0, "train_loss": 1.0, "test_accuracy": acc}]
    return RunResult(strategy, ratio, seed, epochs, acc, 0.0, 1.0)


# --- config ----------------------------------------------------------------------

def test_minimal_config_gets_desk_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    assert cfg.profile == "desk"
    assert cfg.ratios == (0.5, 0.7, 0.9, 0.95, 0.98)
    assert cfg.strategies == ("l1", "lth", "lth_iter", "eb", "scratch", "rst", "rst_iter")
    assert cfg.seeds == (0, 1, 2)
    assert cfg.cycles == 5 and cfg.eb_stop_fraction == 0.125
    assert cfg.finetune.momentum == 0.9 and cfg.finetune.weight_decay == 5e-4


def test_profile_override(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL), profile="paper")
    assert cfg.finetune.epochs == 200 and cfg.rst.v_s == 40000


def test_ratio_one_is_rejected_with_line(tmp_path):
    p = write(tmp_path, MINIMAL + "ratios: [0.5,\n  1.0]\n")
    with pytest.raises(ConfigurationError, match=r"cfg\.yaml:11: ratios\.1"):
        parse_config(p)


@pytest.mark.parametrize("extra,match", [
    ("bogus: 1\n", r":10: bogus: unknown key"),
    ("finetune: {epochs: -1}\n", r":10: finetune\.epochs"),
    ("strategies: [rst, magic]\n", "unknown strategy"),
    ("seeds: []\n", "non-empty"),
    ("rst: {lambda0: 2.0}\n", r"rst"),
    ("ratios: [0.5\n", "YAML parse error"),
])
def test_validation_errors(tmp_path, extra, match):
    with pytest.raises(ConfigurationError, match=match):
        parse_config(write(tmp_path, MINIMAL + extra))


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigurationError):
        parse_config(tmp_path / "nope.yaml")


def test_network_errors_are_config_errors(tmp_path):
    bad = MINIMAL.replace("out_features: 12}", "out_features: 12, in_features: 7}")
    with pytest.raises(ConfigurationError, match="network"):
        parse_config(write(tmp_path, bad))


def test_round_trip(tmp_path):
    cfg = parse_config(write(tmp_path, TINY))
    again = parse_config(write(tmp_path, dump_config(cfg), "resolved.yaml"))
    assert again == cfg
    assert again.digest() == cfg.digest()


# --- cost ----------------------------------------------------------------------------

def test_full_profile_cost_accounting(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL), profile="paper")
    n = 50_000
    assert total_cost_epochs("lth", cfg, n) == 400
    assert cost_epochs("rst", cfg, n) == 115.2
    assert total_cost_epochs("rst", cfg, n) == pytest.approx(315.2, abs=1e-12)
    assert cost_epochs("rst_iter", cfg, n) == 128.0
    assert cost_epochs("lth_iter", cfg, n) == 250.0
    assert cost_epochs("eb", cfg, n) == 25.0
    assert cost_epochs("scratch", cfg, n) == 0.0


# --- aggregation -------------------------------------------------------------------------

def test_table_values():
    assert format(mean_std([93.40, 93.22, 93.36])[0], ".2f") == "93.33"
    rows = aggregate([result("l1", 0.5, s, a) for s, a in enumerate([93.40, 93.22, 93.36])]
                     + [result("lth", 0.5, s, a) for s, a in enumerate([92.99, 92.65, 92.37])])
    assert [r.cell() for r in rows] == ["93.33±0.08", "92.67±0.25"]


def test_single_run_has_zero_std():
    assert aggregate([result("rst", 0.9, 0, 88.123)])[0].cell() == "88.12±0.00"


def test_row_order():
    rs = [result(s, 0.9, 0, 50.0) for s in ["rst_iter", "scratch", "l1", "rst", "eb", "lth", "lth_iter"]]
    assert [r.strategy for r in aggregate(rs)] == ["l1", "lth", "lth_iter", "eb", "scratch", "rst", "rst_iter"]
    assert format_table(aggregate(rs)).splitlines()[1].startswith("l1")


# --- matrix ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    return parse_config(write(d, TINY))


def test_single_cell(tiny_cfg, tmp_path):
    cfg = config_from_dict({**_as_raw(tiny_cfg), "strategies": ["scratch"]})
    out = run_matrix(cfg, tmp_path)
    assert len(out.results) == 1 and out.ok
    r = out.results[0]
    assert [e["epoch"] for e in r.epochs] == [0, 1, 2]
    assert (tmp_path / "cells" / "scratch__r0.9__s0.json").exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["cells"][0]["status"] == "ok"


def _as_raw(cfg):
    import yaml
    return yaml.safe_load(dump_config(cfg))


def test_full_tiny_matrix_resume_and_shared_masks(tiny_cfg, tmp_path):
    first = run_matrix(tiny_cfg, tmp_path)
    assert first.ok and len(first.results) == 7
    by = {r.strategy: r for r in first.results}
    assert by["scratch"].mask_checksum == by["rst"].mask_checksum
    assert by["rst"].extrusion_trace and not by["scratch"].extrusion_trace
    lams = [row[1] for row in by["rst"].extrusion_trace]
    assert lams == sorted(lams)
    assert by["rst"].cost_epochs == (4 + 4) * 16 / 72

    mtimes = {p.name: p.stat().st_mtime_ns for p in (tmp_path / "cells").iterdir()}
    second = run_matrix(tiny_cfg, tmp_path)
    assert second.reused == 7
    assert {p.name: p.stat().st_mtime_ns for p in (tmp_path / "cells").iterdir()} == mtimes
    assert [r.to_json() for r in second.results] == [r.to_json() for r in first.results]


def test_resume_after_interruption(tiny_cfg, tmp_path):
    cfg = config_from_dict({**_as_raw(tiny_cfg), "strategies": ["scratch", "rst", "l1"]})
    full = run_matrix(cfg, tmp_path / "a")
    run_matrix(cfg, tmp_path / "b")
    (tmp_path / "b" / "cells" / "rst__r0.9__s0.json").unlink()
    resumed = run_matrix(cfg, tmp_path / "b")
    assert resumed.reused == 2
    emit_report(full.results, tmp_path / "a")
    emit_report(resumed.results, tmp_path / "b")
    for name in ("results.csv", "summary.csv", "curves.jsonl", "accuracy_r0.9.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_changed_config_is_not_reused(tiny_cfg, tmp_path):
    cfg = config_from_dict({**_as_raw(tiny_cfg), "strategies": ["scratch"]})
    run_matrix(cfg, tmp_path)
    changed = config_from_dict({**_as_raw(cfg), "finetune": {**_as_raw(cfg)["finetune"], "epochs": 1}})
    assert run_matrix(changed, tmp_path).reused == 0


# --- reports ---------------------------------------------------------------------------------

def fake_results():
    rng = np.random.default_rng(0)
    out = []
    for ratio in (0.5, 0.9):
        for s in ("l1", "scratch", "rst"):
            for seed in range(3):
                accs = list(np.round(50 + 40 * (1 - np.exp(-np.arange(6) / 2)) + rng.normal(size=6), 3))
                ep = [{"epoch": i, "lr": 0.1, "train_loss": 1.0 / (i + 1), "test_accuracy": float(a)}
                      for i, a in enumerate(accs)]
                out.append(RunResult(s, ratio, seed, ep, float(accs[-1]), 0.0, 0.5 + seed))
    return out


def test_emit_report_files(tmp_path):
    rs = fake_results()
    files = emit_report(rs, tmp_path)
    rows = (tmp_path / "results.csv").read_text().splitlines()
    assert rows[0] == "strategy,ratio,seed,final_accuracy,cost_epochs"
    assert len(rows) == 1 + len(rs)
    assert len((tmp_path / "timings.csv").read_text().splitlines()) == 1 + len(rs)
    lines = (tmp_path / "curves.jsonl").read_text().splitlines()
    assert len(lines) == 6 * len(rs)
    assert list(json.loads(lines[0])) == ["strategy", "ratio", "seed", "epoch", "lr", "train_loss", "test_accuracy"]
    for ratio in (0.5, 0.9):
        svg = (tmp_path / f"accuracy_r{ratio!r}.svg").read_text()
        assert svg.count("<polyline") == 3 and svg.count("<polygon") == 3
        assert 'version="1.1"' in svg
    assert set(files) >= {"results", "curves", "summary"}


def test_reemit_is_byte_identical(tmp_path):
    rs = fake_results()
    cells = tmp_path / "a" / "cells"
    cells.mkdir(parents=True)
    for r in rs:
        (cells / f"{r.strategy}__r{r.ratio!r}__s{r.seed}.json").write_text(r.to_json())
    emit_report(rs, tmp_path / "a")
    emit_report(load_results(tmp_path / "a"), tmp_path / "b")
    for f in (tmp_path / "a").glob("*.*"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_emit_report_needs_results(tmp_path):
    with pytest.raises(ConfigurationError):
        emit_report([], tmp_path)


# --- CLI ------------------------------------------------------------------------------------------

def test_cli_run_and_report(tmp_path, capsys):
    cfg = write(tmp_path, TINY.replace("seeds: [0]", "seeds: [0]\nstrategies: [scratch, rst]"))
    assert main(["run", str(cfg), "--out", str(tmp_path / "out")]) == 0
    assert "2 cells (0 reused), 0 failed" in capsys.readouterr().out
    assert main(["run", str(cfg), "--out", str(tmp_path / "out"), "--resume"]) == 0
    assert "2 cells (2 reused)" in capsys.readouterr().out
    (tmp_path / "out" / "results.csv").unlink()
    assert main(["report", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "results.csv").exists()
    assert re.search(r"rst\s+\d+\.\d\d±\d\.\d\d", capsys.readouterr().out)


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert main(["run", str(write(tmp_path, MINIMAL + "ratios: [1.0]\n"))]) == 2
    assert "cfg.yaml:10" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_cli_cell_failure_exit_code(tmp_path, monkeypatch):
    import dualticket.experiment as ex

    def boom(*a, **k):
        raise RuntimeError("diverged")

    monkeypatch.setattr(ex, "finetune", boom)
    cfg = write(tmp_path, TINY.replace("seeds: [0]", "seeds: [0]\nstrategies: [scratch]"))
    assert main(["run", str(cfg), "--out", str(tmp_path / "out")]) == 1
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["cells"][0]["status"] == "failed"


def test_cli_audit(tmp_path, tiny_cfg, capsys):
    net = tiny_cfg.network.build()
    save_mask(random_mask(net, SparsityPlan(0.9), 0), tmp_path / "m.bin")
    assert main(["audit", str(tmp_path / "m.bin")]) == 0
    out = capsys.readouterr().out
    assert "2.weight" in out and "0.9010" in out
    (tmp_path / "bad.bin").write_bytes(b"junk\n")
    assert main(["audit", str(tmp_path / "bad.bin")]) == 2
