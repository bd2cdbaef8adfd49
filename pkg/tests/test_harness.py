import csv
import json
import shutil
from dataclasses import replace

import numpy as np
import pytest

from synthehr import cli, harness
from synthehr.harness import (Cell, ConfigError, DegradeSettings, ProvenanceError, config_from_dict, emit_report,
                              load_config, plan_cells, run)
from synthehr.llm import API_KEY_ENV

SMALL = {"real_data": {"simulate": {"n_rows": 3000, "seed": 2}}, "group_feature": "is_female",
         "strategies": ["naive", "group"], "feature_counts": [5, 10], "sample_sizes": [300],
         "seed_rows": 500, "n_boot": 20, "workers": 1,
         "gbm": {"n_trees": 20}, "importance_gbm": {"n_trees": 20}}


def small(**over):
    return config_from_dict({**SMALL, **over})


@pytest.fixture(scope="module")
def four_cells(tmp_path_factory):
    out = tmp_path_factory.mktemp("four")
    return run(small(), out)


def body_rows(markdown, heading):
    section = markdown.split(heading, 1)[1].split("\n## ", 1)[0]
    return [l for l in section.splitlines() if l.startswith("| ") and not l.startswith("| Strategy")]


@pytest.mark.parametrize("bad", [{"strategies": []}, {"feature_counts": [0]}, {"sample_sizes": [-5]},
                                 {"backend": "cloud"}, {"colour": "red"}, {"group_feature": None},
                                 {"arms": [{"name": "a"}, {"name": "a"}]}, {"seed_rows": 10},
                                 {"test_fraction": 1.0}, {"strategies": ["freestyle"]}])
def test_invalid_configs_are_rejected(bad):
    with pytest.raises((ConfigError, ValueError)):
        small(**bad)


def test_top_level_sweep_becomes_a_single_arm():
    cfg = small()
    assert [a.name for a in cfg.arms] == ["main"]
    assert cfg.gbm.n_trees == 20 and cfg.gbm.max_depth == 4
    assert [(c.strategy, c.n_features) for c in plan_cells(cfg)] == \
        [("naive", 5), ("naive", 10), ("group", 5), ("group", 10)]


def test_builtin_config_loads():
    cfg = load_config("paper-trends")
    cells = plan_cells(cfg)
    assert len(cells) == 7 and {c.backend for c in cells} == {"reference"}
    assert [c.n_features for c in cells if c.arm == "features"] == [5, 10, 15, 20]
    assert [c.n_samples for c in cells if c.arm == "samples"] == [1000, 5000, 10000]


def test_config_file_paths_resolve_against_the_file(tmp_path):
    p = tmp_path / "sub" / "cfg.json"
    p.parent.mkdir()
    p.write_text(json.dumps({**SMALL, "output_dir": "out"}))
    cfg = load_config(p)
    assert cfg.resolve(cfg.output_dir) == tmp_path / "sub" / "out"


def test_cell_identity():
    a = Cell("m", "group", 10, 1000, "reference", 0)
    assert a.cell_id == Cell("x", "group", 10, 1000, "reference", 0).cell_id
    assert a.cell_id.startswith("group-f10-n1000-")
    others = [replace(a, n_samples=5000), replace(a, seed=1), replace(a, backend="remote"),
              replace(a, degrade=DegradeSettings(0.05))]
    assert len({a.cell_id} | {o.cell_id for o in others}) == 5
    assert a.rng_seed == replace(a, n_samples=5000).rng_seed != replace(a, seed=1).rng_seed


def test_degrade_schedule():
    sev = DegradeSettings(0.05).severities(["a", "b", "c"], "y")
    assert sev == pytest.approx({"a": 0.0, "b": 0.05, "c": 0.1, "y": 0.15})
    assert "y" not in DegradeSettings(0.1, include_label=False).severities(["a"], "y")


def test_four_cell_sweep(four_cells):
    out = four_cells.output_dir
    assert len(four_cells.cells) == 4 and not four_cells.failed
    assert sorted(p.name for p in (out / "cells").iterdir()) == sorted(c.cell_id for c in four_cells.cells)
    master = list(csv.DictReader(open(out / "master.csv")))
    assert len(master) == 8 and {r["scenario"] for r in master} == {"within", "across"}
    assert list(master[0]) == list(harness.MASTER_COLUMNS)
    for c in four_cells.cells:
        d = out / "cells" / c.cell_id
        for name in ("cell.json", "synthetic.csv", "generation_log.json", "kl.json", "eval_within.json",
                     "eval_across.json", "mia.json", "model.json", "attack_features.csv", "hist_overlay.csv"):
            assert (d / name).exists(), name
    group_cells = [c for c in four_cells.cells if c.strategy == "group"]
    assert all((out / "cells" / c.cell_id / "kl_by_group.json").exists() for c in group_cells)


def test_report_tables(four_cells):
    rep = emit_report(four_cells.output_dir)
    assert rep.exit_code == 0 and not rep.failures
    rows = body_rows(rep.markdown, "## Fidelity and utility by cell")
    assert len(rows) == 4
    assert [r.split("|")[1].strip() for r in rows] == ["naive", "naive", "group", "group"]
    assert len(body_rows(rep.markdown, "## Membership inference")) == 4
    assert "Provenance: 104 table values matched" in rep.markdown
    plots = four_cells.output_dir / "plots"
    for name in ("mia_by_features.csv", "kl_by_group.csv", "histograms.csv"):
        assert (plots / name).exists()
    hist = list(csv.DictReader(open(plots / "histograms.csv")))
    assert {"real_density", "synthetic_density", "bin_lo", "bin_hi"} <= set(hist[0])


def test_provenance_tampering_is_caught(four_cells, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(four_cells.output_dir, copy)
    text = (copy / "master.csv").read_text().splitlines()
    cells = text[1].split(",")
    idx = list(harness.MASTER_COLUMNS).index("auroc")
    cells[idx] = "0.123"
    (copy / "master.csv").write_text("\n".join([text[0], ",".join(cells)] + text[2:]) + "\n")
    with pytest.raises(ProvenanceError, match="auroc"):
        emit_report(copy)


def test_resume_recomputes_only_missing_cells(four_cells, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(four_cells.output_dir, copy)
    before = (copy / "master.csv").read_bytes()
    victim = four_cells.cells[2].cell_id
    shutil.rmtree(copy / "cells" / victim)
    again = run(small(), copy)
    assert again.computed == [victim] and len(again.skipped) == 3
    assert (copy / "master.csv").read_bytes() == before


def test_same_config_same_master(four_cells, tmp_path):
    again = run(small(), tmp_path / "again")
    assert again.master_csv.read_bytes() == four_cells.master_csv.read_bytes()


def test_parallel_workers_match_serial(four_cells, tmp_path):
    par = run(small(workers=2), tmp_path / "par")
    assert par.master_csv.read_bytes() == four_cells.master_csv.read_bytes()


def test_unreachable_remote_fails_only_its_cells(tmp_path, monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "token")
    cfg = config_from_dict({**SMALL, "strategies": None, "feature_counts": None, "sample_sizes": None,
                            "remote": {"endpoint": "http://127.0.0.1:9/v1", "max_retries": 0},
                            "arms": [{"name": "local", "strategies": ["naive"], "feature_counts": [5],
                                      "sample_sizes": [200]},
                                     {"name": "llm", "strategies": ["naive"], "feature_counts": [5],
                                      "sample_sizes": [200], "backend": "remote"}]})
    res = run(cfg, tmp_path)
    status = {c.arm: res.results[c.cell_id]["status"] for c in res.cells}
    assert status == {"local": "ok", "llm": "failed"}
    failed = [r for r in csv.DictReader(open(res.master_csv)) if r["status"] == "failed"]
    assert len(failed) == 2 and "LLMError" in failed[0]["error"]
    assert (tmp_path / "cells" / res.failed[0] / "error.json").exists()
    rep = emit_report(tmp_path)
    assert rep.exit_code == 0 and len(rep.failures) == 1 and "## Failed cells" in rep.markdown


def test_failed_only_run(tmp_path):
    res = run(small(strategies=["naive"], feature_counts=[200]), tmp_path)
    assert len(res.failed) == 1
    rep = emit_report(tmp_path)
    assert rep.exit_code == 1 and "No cell completed" in rep.markdown
    assert "## Fidelity" not in rep.markdown and "200 features requested" in rep.markdown


def test_degraded_sweep_widens_kl(tmp_path):
    cfg = small(strategies=["group"], feature_counts=[10], degrade={"slope": 0.3})
    res = run(cfg, tmp_path / "deg")
    clean = run(small(strategies=["group"], feature_counts=[10]), tmp_path / "clean")
    kl = lambda r: float(next(iter(csv.DictReader(open(r.master_csv))))["avg_kl"])
    assert kl(res) > kl(clean)


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**SMALL, "feature_counts": [5], "output_dir": "results"}))
    return p


def test_cli_cells_and_run(config_file, capsys):
    assert cli.main(["cells", str(config_file)]) == 0
    listed = capsys.readouterr().out.strip().splitlines()
    assert len(listed) == 2 and listed[0].startswith("naive-f5-n300-")
    assert cli.main(["run", str(config_file)]) == 0
    out = capsys.readouterr().out
    assert "2 cells: 2 computed" in out
    assert cli.main(["run", str(config_file)]) == 0
    assert "0 computed, 2 reused" in capsys.readouterr().out
    assert cli.main(["report", str(config_file.parent / "results")]) == 0
    assert "# Experiment report" in capsys.readouterr().out


def test_cli_gen_single_cell(config_file, capsys):
    cell = plan_cells(load_config(config_file))[1].cell_id
    assert cli.main(["gen", str(config_file), "--cell", cell]) == 0
    assert (config_file.parent / "results" / "generated" / cell / "synthetic.csv").exists()
    assert cli.main(["gen", str(config_file), "--cell", "nope"]) == 2


def test_cli_error_exits(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"real_data": "x.csv", "strategies": []}')
    assert cli.main(["run", str(bad)]) == 2
    bad.write_text("{not json")
    assert cli.main(["cells", str(bad)]) == 2
    assert cli.main(["cells", str(tmp_path / "missing.json")]) == 2


def test_cli_simulate_and_validate(tmp_path, capsys):
    data, schema = tmp_path / "c.csv", tmp_path / "c.schema"
    assert cli.main(["simulate", str(data), "--rows", "50", "--schema", str(schema)]) == 0
    assert cli.main(["validate", str(schema), str(data)]) == 0
    assert "50 rows checked, 0 invalid" in capsys.readouterr().out
    lines = data.read_text().splitlines()
    header = lines[0].split(",")
    row = lines[1].split(",")
    row[header.index("age")] = "250"
    lines[1] = ",".join(row)
    lines[2] = lines[2] + ",extra"
    data.write_text("\n".join(lines) + "\n")
    assert cli.main(["validate", str(schema), str(data)]) == 1
    out = capsys.readouterr().out
    assert "line 2, column age: out_of_range ('250')" in out
    assert "line 3:" in out and "50 rows checked, 2 invalid" in out
    schema.write_text("nonsense")
    assert cli.main(["validate", str(schema), str(data)]) == 2
