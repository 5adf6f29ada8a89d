import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

import metaprompt
from metaprompt import runner
from metaprompt.cli import check_hash_consistency, compare_table, main
from metaprompt.pipeline import EvalReport, arg_from_csv
from metaprompt.prompting import PromptEmbeddings
from metaprompt.runner import (HYPER_GRIDS, OUT_ENV, ConfigError, ExperimentConfig, build_registry,
                               expand_cells, is_complete, output_root)
from metaprompt.taskgen import load_tasks

SMOKE = Path(metaprompt.__file__).parent / "configs" / "smoke.json"
# first-run ARG ordering on the bundled smoke config
GOLDEN_SMOKE_ORDER = ["fomaml", "maml", "mtl", "reptile"]


def tiny_config(**changes):
    cfg = {
        "name": "tiny",
        "backbone": {"d": 32, "L": 2, "V": 64, "seed": 7},
        "tasks": {"family_seed": 0, "groups": [
            {"family": "classification", "seeds": [0, 1, 2], "pool_size": 1200},
            {"family": "classification", "seeds": [100], "pool_size": 1200},
            {"family": "qa_span", "seeds": [0]},
        ]},
        "partitions": [{"name": "p", "source": ["cla-f0-s0", "cla-f0-s1", "cla-f0-s2"],
                        "target": ["cla-f0-s100"]}],
        "methods": ["pt", "maml"],
        "meta": {"total_steps": 5, "inner_lr": 0.05},
        "pt": {"total_steps": 40, "eval_interval": 20, "lr_search_grid": [0.5]},
        "prompt_len": 4,
        "seeds": [0],
        "similarity": {"tasks": ["cla-f0-s0", "cla-f0-s1", "qa_-f0-s0"], "steps": 8},
    }
    cfg.update(changes)
    return cfg


def write_config(tmp_path, rec, name="exp.json", **dump):
    path = tmp_path / name
    path.write_text(json.dumps(rec, **dump))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("tiny")
    path = write_config(base, tiny_config())
    assert main(["run", "--config", str(path), "--out", str(base / "out")]) == 0
    return path, base / "out" / "tiny"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    start = time.perf_counter()
    code = main(["run", "--config", str(SMOKE), "--out", str(out)])
    return code, out / "smoke", time.perf_counter() - start


# --- configs -----------------------------------------------------------------------------

def test_config_hash_ignores_whitespace_and_key_order(tmp_path):
    rec = tiny_config()
    a = ExperimentConfig.load(write_config(tmp_path, rec, "a.json"))
    b = ExperimentConfig.load(write_config(tmp_path, dict(reversed(list(rec.items()))), "b.json",
                                           indent=7, sort_keys=True))
    assert a.config_hash() == b.config_hash()
    c = ExperimentConfig.load(write_config(tmp_path, tiny_config(seeds=[1]), "c.json"))
    assert c.config_hash() != a.config_hash()


@pytest.mark.parametrize("change,match", [
    ({"surprise": 1}, "unknown keys"),
    ({"methods": ["maml", "anil"]}, "methods"),
    ({"meta": {"outer_lr": -1.0}}, "invalid settings"),
    ({"pt": {"step_count": 3}}, "unknown keys"),
    ({"seeds": []}, "seeds"),
    ({"backbone": {"d": 32, "L": 2, "V": 64}}, "seed"),
])
def test_invalid_configs_raise_config_errors(change, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(tiny_config(**change))


def test_missing_required_key():
    rec = tiny_config()
    del rec["partitions"]
    with pytest.raises(ConfigError, match="partitions"):
        ExperimentConfig.from_dict(rec)


def test_registry_errors(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config(tasks={"groups": [
        {"family": "classification", "seeds": [0]}, {"family": "classification", "seeds": [0]}]}))
    with pytest.raises(ConfigError, match="duplicate"):
        build_registry(cfg)
    cfg = ExperimentConfig.from_dict(tiny_config(tasks={"file": "nowhere.jsonl"}), base_dir=tmp_path)
    with pytest.raises(ConfigError, match="not found"):
        build_registry(cfg)


def test_output_root_precedence(tmp_path, monkeypatch):
    cfg = ExperimentConfig.from_dict(tiny_config(output_dir="from_cfg"), base_dir=tmp_path)
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert output_root(cfg) == tmp_path / "from_cfg"
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "from_env"))
    assert output_root(cfg) == tmp_path / "from_env"
    assert output_root(cfg, str(tmp_path / "from_flag")) == tmp_path / "from_flag"


def test_environment_variable_redirects_a_run(tmp_path, monkeypatch):
    path = write_config(tmp_path, tiny_config(methods=["pt"]))
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env_out"))
    assert main(["run", "--config", str(path)]) == 0
    assert (tmp_path / "env_out" / "tiny" / "summary.csv").is_file()


# --- cells and sweeps ------------------------------------------------------------------

def test_hyperparameter_axis_enumerates_the_search_grids():
    cfg = ExperimentConfig.from_dict(tiny_config(methods=["pt", "maml", "reptile", "mtl"]))
    registry = build_registry(cfg)
    cells = expand_cells(cfg, registry, axis="hyperparams")
    per_method = {m: [c for c in cells if c.method == m] for m in cfg.methods}
    assert len(per_method["pt"]) == 1
    assert len(per_method["maml"]) == 27 and len(per_method["reptile"]) == 135
    assert len(per_method["mtl"]) == 36
    assert HYPER_GRIDS["maml"] == {"inner_lr": [2e-5, 3e-5, 5e-5], "outer_lr": [2e-1, 3e-1, 5e-1],
                                   "total_steps": [2500, 5000, 10000]}
    assert HYPER_GRIDS["reptile"]["inner_steps"] == [2, 4, 6, 8, 10]
    assert HYPER_GRIDS["mtl"] == {"mtl_lr": [2e-1, 3e-1, 5e-1], "mtl_batch_size": [2, 4, 6, 8],
                                  "mtl_epochs": [5, 10, 20]}
    metas = {(c.pipeline.meta.inner_lr, c.pipeline.meta.outer_lr, c.pipeline.meta.total_steps)
             for c in per_method["maml"]}
    assert len(metas) == 27
    assert len({c.key(cfg, registry) for c in cells}) == len(cells)


def test_source_count_axis_uses_nested_prefixes():
    cfg = ExperimentConfig.from_dict(tiny_config(sweep={"source_count": [1, 2, 3]}))
    cells = [c for c in expand_cells(cfg, build_registry(cfg), axis="source_count") if c.method == "maml"]
    sources = [c.partition.source for c in cells]
    assert [len(s) for s in sources] == [1, 2, 3]
    assert all(sources[i] == sources[i + 1][:len(sources[i])] for i in range(2))
    bad = ExperimentConfig.from_dict(tiny_config(sweep={"source_count": [9]}))
    with pytest.raises(ConfigError, match="exceeds"):
        expand_cells(bad, build_registry(bad), axis="source_count")


def test_shot_axis_defaults_and_validation():
    cfg = ExperimentConfig.from_dict(tiny_config())
    cells = [c for c in expand_cells(cfg, build_registry(cfg), axis="source_shots") if c.method == "maml"]
    assert [c.value for c in cells] == [16, 32, 64, 128, "all"]
    bad = ExperimentConfig.from_dict(tiny_config(sweep={"target_shots": [0]}))
    with pytest.raises(ConfigError, match="shots"):
        expand_cells(bad, build_registry(bad), axis="target_shots")


def test_target_shot_sweep_writes_three_reports(tmp_path):
    path = write_config(tmp_path, tiny_config(methods=["maml"], sweep={"target_shots": [16, 32, 64]}))
    assert main(["sweep", "--config", str(path), "--axis", "target_shots", "--out", str(tmp_path)]) == 0
    reports = sorted((tmp_path / "tiny" / "cells").rglob("report.json"))
    assert len(reports) == 3
    shots = sorted(EvalReport.load(p).config["pipeline"]["target_shots"] for p in reports)
    assert shots == [16, 32, 64]
    rows = list(csv.DictReader(open(tmp_path / "tiny" / "sweep_target_shots.csv")))
    assert [r["value"] for r in rows] == ["16", "32", "64"]
    assert (tmp_path / "tiny" / "sweep_target_shots.png").stat().st_size > 0


# --- run ----------------------------------------------------------------------------------

def test_run_writes_reports_summary_and_figure(tiny_run):
    _, root = tiny_run
    reports = sorted((root / "cells").rglob("report.json"))
    assert len(reports) == 2
    assert all(EvalReport.load(p).status == "complete" for p in reports)
    rows = list(csv.DictReader(open(root / "summary.csv")))
    assert {r["method"] for r in rows} == {"pt", "maml"}
    assert next(r for r in rows if r["method"] == "pt")["arg"] == "0.0"
    assert (root / "summary.png").stat().st_size > 0
    assert "ARG=" in (root / "progress.log").read_text()


def test_rerun_skips_completed_cells(tiny_run, capsys):
    path, root = tiny_run
    before = {p: p.stat().st_mtime_ns for p in (root / "cells").rglob("report.json")}
    assert main(["run", "--config", str(path), "--out", str(root.parent)]) == 0
    assert "skipped 2 completed cells" in capsys.readouterr().out
    assert before == {p: p.stat().st_mtime_ns for p in (root / "cells").rglob("report.json")}


def test_force_reruns_cells_identically(tmp_path):
    path = write_config(tmp_path, tiny_config(methods=["maml"]))
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == 0
    (report,) = (tmp_path / "tiny" / "cells").rglob("report.json")
    first = EvalReport.load(report).stable_dict()
    assert main(["run", "--config", str(path), "--out", str(tmp_path), "--force"]) == 0
    assert EvalReport.load(report).stable_dict() == first


def test_seed_override_changes_the_cell(tmp_path):
    path = write_config(tmp_path, tiny_config(methods=["pt"]))
    assert main(["run", "--config", str(path), "--out", str(tmp_path), "--seeds", "0,1"]) == 0
    (report,) = (tmp_path / "tiny" / "cells").rglob("report.json")
    assert EvalReport.load(report).seeds == [0, 1]


def test_parallel_workers_match_a_serial_run(tmp_path):
    path = write_config(tmp_path, tiny_config())
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "serial")]) == 0
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "pool"), "--jobs", "2"]) == 0

    def reports(root):
        return {p.parent.name: EvalReport.load(p).stable_dict() for p in root.rglob("report.json")}

    assert reports(tmp_path / "serial") == reports(tmp_path / "pool")


def test_missing_config_exits_1_with_the_path(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert main(["run", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_malformed_json_exits_1(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["run", "--config", str(path)]) == 1


def test_runtime_failure_exits_2_and_keeps_partial_results(tmp_path, monkeypatch):
    path = write_config(tmp_path, tiny_config(methods=["pt"]))

    def broken(*args, out_dir=None, **kwargs):
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        EvalReport("p", "pt", [0], status="failed").save(Path(out_dir) / "report.json")
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(runner, "run_pipeline", broken)
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == 2
    (report,) = (tmp_path / "tiny" / "cells").rglob("report.json")
    assert not is_complete(report.parent)
    assert "FAILED" in (tmp_path / "tiny" / "progress.log").read_text()
    monkeypatch.undo()
    # the failed cell is not treated as done
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == 0
    assert is_complete(report.parent)


# --- compare --------------------------------------------------------------------------------

def test_compare_pins_prompt_tuning_to_zero(tiny_run, tmp_path, capsys):
    _, root = tiny_run
    out = tmp_path / "cmp.csv"
    assert main(["compare", str(root / "cells"), "--csv", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["method", "p"] and rows[1] == ["pt", "0.0"]
    assert out.with_suffix(".png").is_file()
    assert "* best in column" in capsys.readouterr().out


def test_identical_reports_give_identical_rows(tiny_run):
    _, root = tiny_run
    maml = next(EvalReport.load(p) for p in (root / "cells").rglob("report.json")
                if EvalReport.load(p).method == "maml")
    rows, cols, cells = compare_table([maml, maml])
    assert rows == ["pt", "maml", "maml#2"] and cols == ["p"]
    assert cells[("maml", "p")] == cells[("maml#2", "p")] == maml.arg


def test_mismatched_partitions_are_rejected(tiny_run, tmp_path):
    _, root = tiny_run
    path = next((root / "cells").rglob("report.json"))
    rec = json.loads(path.read_text())
    rec["config"]["partition"]["target"] = ["someone-else"]
    other = tmp_path / "other" / "report.json"
    other.parent.mkdir()
    other.write_text(json.dumps(rec))
    assert main(["compare", str(path), str(other), "--csv", str(tmp_path / "x.csv")]) == 1


def test_compare_needs_existing_reports(tmp_path):
    assert main(["compare", str(tmp_path / "nothing.json"), "--csv", str(tmp_path / "x.csv")]) == 1


# --- verify ---------------------------------------------------------------------------------

def test_verify_directory_checks_every_artifact(tiny_run):
    _, root = tiny_run
    problems, checked = check_hash_consistency(root)
    assert problems == [] and checked == 2 * 2 + 2  # two reports + csvs, one prompt + sidecar
    assert main(["verify", str(root)]) == 0


def test_verify_detects_a_foreign_hash(tiny_run, tmp_path):
    import shutil
    _, root = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    prompt_path = next(copy.rglob("prompt.json"))
    prompt = PromptEmbeddings.load(prompt_path)
    prompt.meta["producing_config_hash"] = "0" * 16
    PromptEmbeddings(prompt.matrix, "meta_learned", prompt.meta).save(prompt_path)
    problems, _ = check_hash_consistency(copy)
    assert len(problems) == 1 and "prompt.json" in problems[0]
    assert main(["verify", str(copy)]) == 2


def test_verify_config_reruns_and_compares(tiny_run, capsys):
    path, _ = tiny_run
    assert main(["verify", "--config", str(path)]) == 0
    assert "2 reports compared, 0 differ" in capsys.readouterr().out


def test_verify_needs_a_target(tmp_path):
    assert main(["verify"]) == 1
    assert main(["verify", str(tmp_path / "missing")]) == 1


# --- similarity and gen-tasks --------------------------------------------------------------

def test_similarity_from_config(tiny_run, tmp_path):
    path, _ = tiny_run
    out = tmp_path / "sim"
    assert main(["similarity", "--config", str(path), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "similarity.csv")))
    assert len(rows) == 9 and len({r["config_hash"] for r in rows}) == 1
    meta = json.loads((out / "similarity.json").read_text())
    assert (meta["same_pairs"], meta["cross_pairs"]) == (1, 2)
    assert (out / "similarity.png").is_file()
    assert len(list((out / "prompts").glob("*.json"))) == 3
    assert check_hash_consistency(out) == ([], 4)


def test_similarity_from_prompt_files(tmp_path):
    rng = np.random.default_rng(0)
    paths = []
    for tid in ("a", "b"):
        p = tmp_path / f"{tid}.json"
        PromptEmbeddings(rng.normal(size=(6, 4)), "meta_learned", {"task_id": tid}).save(p)
        paths.append(str(p))
    assert main(["similarity", *paths, "--out", str(tmp_path / "o"), "--energy", "0.9"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "o" / "similarity.csv")))
    assert [(r["task_id_a"], r["task_id_b"]) for r in rows] == [("a", "a"), ("a", "b"), ("b", "a"), ("b", "b")]
    assert float(rows[0]["score"]) == pytest.approx(1.0)
    assert main(["similarity", str(tmp_path / "nope.json")]) == 1


def test_gen_tasks_writes_jsonl(tmp_path):
    out = tmp_path / "tasks.jsonl"
    assert main(["gen-tasks", "--family", "qa_span", "--seeds", "0,1", "--out", str(out)]) == 0
    tasks = load_tasks(out)
    assert [t.id for t in tasks] == ["qa_-f0-s0", "qa_-f0-s1"]
    assert main(["gen-tasks", "--out", str(out)]) == 1


def test_gen_tasks_from_config_round_trips_into_a_registry(tmp_path):
    out = tmp_path / "reg.jsonl"
    cfg_path = write_config(tmp_path, tiny_config())
    assert main(["gen-tasks", "--config", str(cfg_path), "--out", str(out)]) == 0
    from_file = ExperimentConfig.from_dict(tiny_config(tasks={"file": "reg.jsonl"}), base_dir=tmp_path)
    original = build_registry(ExperimentConfig.from_dict(tiny_config()))
    loaded = build_registry(from_file)
    assert {k: t.pool_hash() for k, t in loaded.items()} == {k: t.pool_hash() for k, t in original.items()}


# --- bundled smoke config ----------------------------------------------------------------------

def test_smoke_config_finishes_within_two_minutes(smoke_run):
    code, root, seconds = smoke_run
    assert code == 0 and seconds < 120
    assert len(list((root / "cells").rglob("report.json"))) == 5


def test_smoke_method_ordering_matches_the_golden_run(smoke_run):
    _, root, _ = smoke_run
    reports = [EvalReport.load(p) for p in (root / "cells").rglob("report.json")]
    args = {r.method: r.arg for r in reports}
    assert args["pt"] == 0.0
    assert sorted(GOLDEN_SMOKE_ORDER, key=lambda m: -args[m]) == GOLDEN_SMOKE_ORDER
    assert len({args[m] for m in GOLDEN_SMOKE_ORDER}) == 4  # strict
    for p in (root / "cells").rglob("report.json"):
        rep = EvalReport.load(p)
        assert abs(arg_from_csv(p.parent / "scores.csv") - rep.arg) <= 1e-12 * max(1.0, abs(rep.arg))
