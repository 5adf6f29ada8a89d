"""Command-line entry point: ``metaprompt {run,sweep,compare,similarity,verify,gen-tasks}``.

Exit codes: 0 success, 1 config error, 2 runtime failure (partial results kept).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import tempfile
from pathlib import Path

from .backbone import make_vocab
from .fileio import atomic_write
from .pipeline import EvalReport, canonical_hash
from .plotting import plot_arg_bars, plot_similarity_heatmap, plot_sweep
from .prompting import PromptEmbeddings
from .runner import (SWEEP_AXES, ConfigError, ExperimentConfig, build_backbone, build_registry,
                     family_summary, output_root, run_cells, similarity_settings,
                     tune_task_prompts, write_summary_csv)
from .similarity import METHOD_NOTE, similarity_matrix, write_similarity_csv
from .taskgen import FAMILIES, generate_task, save_tasks

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated ints, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaprompt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config (JSON)")
        p.add_argument("--seeds", type=_seed_list, help="override config seeds, e.g. 0,1,2")
        p.add_argument("--force", action="store_true", help="re-run completed cells")
        p.add_argument("--jobs", type=_positive, default=1, help="worker processes")
        p.add_argument("--out", help="output root (beats $METAPROMPT_OUT and the config)")

    common(sub.add_parser("run", help="run every (method, partition) cell"))
    p = sub.add_parser("sweep", help="run one report per value of a sweep axis")
    common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)

    p = sub.add_parser("compare", help="method x partition ARG table from reports")
    p.add_argument("reports", nargs="+", help="report.json files or directories holding them")
    p.add_argument("--csv", default="compare.csv", help="CSV output path (figure goes alongside)")

    p = sub.add_parser("similarity", help="subspace correlation between prompts")
    p.add_argument("prompts", nargs="*", help="prompt JSON files")
    p.add_argument("--config", help="tune one prompt per task of this config first")
    p.add_argument("--out", help="output directory")
    p.add_argument("--energy", type=float, default=None, help="energy threshold (default 0.95)")

    p = sub.add_parser("verify", help="determinism (--config) or hash consistency (DIR)")
    p.add_argument("directory", nargs="?", help="output directory to check for hash consistency")
    p.add_argument("--config", help="run the config twice and compare reports bit for bit")
    p.add_argument("--seeds", type=_seed_list)

    p = sub.add_parser("gen-tasks", help="write generated tasks as JSONL")
    p.add_argument("--config", help="write the tasks of this config's registry")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--seeds", type=_seed_list, default=[0])
    p.add_argument("--family-seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--out", required=True, help="JSONL output path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_compare,
               "similarity": cmd_similarity, "verify": cmd_verify,
               "gen-tasks": cmd_gen_tasks}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _load(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config)


def cmd_run(args) -> int:
    cfg = _load(args)
    summary = run_cells(cfg, output_root(cfg, args.out), args.seeds, None, args.force, args.jobs)
    write_summary_csv(summary.rows, summary.root / "summary.csv")
    table = {}
    for r in summary.rows:
        table.setdefault(r["partition"], {})[r["method"]] = r["arg"]
    if table:
        plot_arg_bars(table, summary.root / "summary.png")
    print(f"wrote {summary.root / 'summary.csv'}")
    return EXIT_RUNTIME if summary.failed else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    summary = run_cells(cfg, output_root(cfg, args.out), args.seeds, args.axis, args.force, args.jobs)
    csv_path = summary.root / f"sweep_{args.axis}.csv"
    write_summary_csv(summary.rows, csv_path)
    series = {}
    for r in summary.rows:
        series.setdefault(f"{r['partition']}/{r['method']}", []).append((r["value"], r["arg"]))
    if series:
        plot_sweep(series, args.axis, csv_path.with_suffix(".png"))
    print(f"wrote {csv_path}")
    return EXIT_RUNTIME if summary.failed else EXIT_OK


def _report_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.rglob("report.json")))
        elif p.is_file():
            paths.append(p)
        else:
            raise ConfigError(f"report not found: {p}")
    if not paths:
        raise ConfigError("no reports found")
    return paths


def compare_table(reports: list[EvalReport]) -> tuple[list, list, dict]:
    """Rows (methods), columns (partitions) and ``{(row, col): arg}``; PT is pinned to 0."""
    layouts = {}
    for rep in reports:
        layout = rep.config.get("partition", {})
        seen = layouts.setdefault(rep.partition, layout)
        if seen.get("target") != layout.get("target"):
            raise ConfigError(f"mismatched partitions: two reports named {rep.partition!r} "
                              f"have different target tasks")
    cols = sorted(layouts)
    cells, rows = {}, ["pt"]
    for rep in reports:
        if rep.method == "pt":
            continue
        row, k = rep.method, 2
        while (row, rep.partition) in cells:
            row, k = f"{rep.method}#{k}", k + 1
        if row not in rows:
            rows.append(row)
        cells[(row, rep.partition)] = rep.arg
    for col in cols:
        cells[("pt", col)] = 0.0
    return rows, cols, cells


def cmd_compare(args) -> int:
    reports = [EvalReport.load(p) for p in _report_paths(args.reports)]
    rows, cols, cells = compare_table(reports)
    best = {}
    for col in cols:
        vals = [(cells[(r, col)], r) for r in rows if cells.get((r, col)) is not None]
        if vals:
            best[col] = max(v for v, _ in vals)
    width = max(10, *(len(c) + 2 for c in cols))
    print("method".ljust(12) + "".join(c.rjust(width) for c in cols))
    for r in rows:
        line = r.ljust(12)
        for col in cols:
            v = cells.get((r, col))
            text = "-" if v is None else f"{v:+.2f}" + ("*" if v == best.get(col) else " ")
            line += text.rjust(width)
        print(line)
    print("* best in column")
    out = Path(args.csv)
    lines = ["method," + ",".join(cols)]
    for r in rows:
        lines.append(r + "," + ",".join("" if cells.get((r, c)) is None else repr(float(cells[(r, c)]))
                                        for c in cols))
    atomic_write(out, "\n".join(lines) + "\n")
    plot_arg_bars({c: {r: cells.get((r, c)) for r in rows} for c in cols}, out.with_suffix(".png"))
    return EXIT_OK


def cmd_similarity(args) -> int:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        settings = similarity_settings(cfg)
        backbone = build_backbone(cfg.backbone)
        registry = build_registry(cfg, backbone.vocab)
        ids = settings["tasks"] or sorted(registry)
        missing = [t for t in ids if t not in registry]
        if missing:
            raise ConfigError(f"similarity.tasks: unknown task ids {missing}")
        config_hash = canonical_hash({"backbone": cfg.backbone, "prompt_len": cfg.prompt_len,
                                      "prompt_seed": cfg.prompt_seed, "similarity": settings,
                                      "tasks": {t: registry[t].pool_hash() for t in ids}})
        out = Path(args.out) if args.out else output_root(cfg) / cfg.name / "similarity"
        prompts = tune_task_prompts(backbone, registry, ids, cfg.prompt_len, cfg.prompt_seed,
                                    settings["steps"], settings["learning_rate"], settings["seed"],
                                    settings["shots"], config_hash)
        for tid, prompt in prompts.items():
            prompt.save(out / "prompts" / f"{tid}.json")
        energy = args.energy if args.energy is not None else settings["energy_threshold"]
    else:
        if not args.prompts:
            raise ConfigError("give prompt files or --config")
        prompts = {}
        for path in args.prompts:
            if not Path(path).is_file():
                raise ConfigError(f"prompt file not found: {path}")
            prompt = PromptEmbeddings.load(path)
            prompts[prompt.meta.get("task_id", Path(path).stem)] = prompt
        hashes = {p.meta.get("producing_config_hash", "") for p in prompts.values()}
        config_hash = hashes.pop() if len(hashes) == 1 else canonical_hash(sorted(hashes))
        out = Path(args.out) if args.out else Path(".")
        energy = args.energy if args.energy is not None else 0.95
    rows = similarity_matrix(prompts, energy)
    out.mkdir(parents=True, exist_ok=True)
    write_similarity_csv(rows, out / "similarity.csv", config_hash)
    plot_similarity_heatmap(rows, out / "similarity.png")
    meta = {"energy_threshold": energy, "method": METHOD_NOTE, "config_hash": config_hash}
    families = {t: p.meta.get("family") for t, p in prompts.items()}
    if all(families.values()):
        meta.update(family_summary(rows, families))
        print(f"same-family mean {_fmt(meta['same_mean'])} over {meta['same_pairs']} pairs, "
              f"cross-family mean {_fmt(meta['cross_mean'])} over {meta['cross_pairs']} pairs")
    atomic_write(out / "similarity.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'similarity.csv'}")
    return EXIT_OK


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.3f}"


def _stable_reports(root: Path) -> dict:
    return {str(p.parent.relative_to(root)): EvalReport.load(p).stable_dict()
            for p in sorted(root.rglob("report.json"))}


def cmd_verify(args) -> int:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        outcomes = []
        with tempfile.TemporaryDirectory() as tmp:
            for run in ("a", "b"):
                summary = run_cells(cfg, Path(tmp) / run, args.seeds, None, True, 1, echo=None)
                if summary.failed:
                    raise RuntimeError(f"run {run} failed cells: {summary.failed}")
                outcomes.append(_stable_reports(Path(tmp) / run))
        a, b = outcomes
        problems = [k for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]
        for k in problems:
            print(f"DIFFERS {k}")
        print(f"{len(a)} reports compared, {len(problems)} differ")
        return EXIT_OK if not problems and a else EXIT_RUNTIME
    if not args.directory:
        raise ConfigError("give a directory or --config")
    root = Path(args.directory)
    if not root.is_dir():
        raise ConfigError(f"directory not found: {root}")
    problems, checked = check_hash_consistency(root)
    for msg in problems:
        print(f"INCONSISTENT {msg}")
    print(f"{checked} artifacts checked, {len(problems)} inconsistent")
    return EXIT_OK if not problems else EXIT_RUNTIME


def check_hash_consistency(root: Path) -> tuple[list, int]:
    """Every artifact in a cell (or similarity) directory must carry the same config hash."""
    problems, checked = [], 0
    for rpath in sorted(root.rglob("report.json")):
        cell = rpath.parent
        want = json.loads(rpath.read_text()).get("config_hash", "")
        checked += 1
        if not cell.name.endswith(f"-{want}"):
            problems.append(f"{cell}: directory name does not end with the report hash {want}")
        if (cell / "scores.csv").is_file():
            checked += 1
            with open(cell / "scores.csv", newline="") as fh:
                got = {row["config_hash"] for row in csv.DictReader(fh)}
            if got - {want}:
                problems.append(f"{cell / 'scores.csv'}: hashes {sorted(got)} != {want}")
        if (cell / "prompt.json").is_file():
            checked += 1
            got = PromptEmbeddings.load(cell / "prompt.json").meta.get("producing_config_hash")
            if got != want:
                problems.append(f"{cell / 'prompt.json'}: hash {got} != {want}")
        if (cell / "upstream.json").is_file():
            checked += 1
            got = json.loads((cell / "upstream.json").read_text())["config"].get("producing_config_hash")
            if got != want:
                problems.append(f"{cell / 'upstream.json'}: hash {got} != {want}")
    for spath in sorted(root.rglob("similarity.csv")):
        checked += 1
        with open(spath, newline="") as fh:
            got = {row["config_hash"] for row in csv.DictReader(fh)}
        if len(got) != 1:
            problems.append(f"{spath}: {len(got)} distinct hashes")
            continue
        want = got.pop()
        for ppath in sorted((spath.parent / "prompts").glob("*.json")):
            checked += 1
            have = PromptEmbeddings.load(ppath).meta.get("producing_config_hash")
            if have != want:
                problems.append(f"{ppath}: hash {have} != {want}")
    return problems, checked


def cmd_gen_tasks(args) -> int:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        tasks = list(build_registry(cfg, build_backbone(cfg.backbone).vocab).values())
    elif args.family:
        vocab = make_vocab(args.vocab_size)
        try:
            tasks = [generate_task(args.family, None, seed=s, family_seed=args.family_seed, vocab=vocab)
                     for s in args.seeds]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        raise ConfigError("give --config or --family")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tasks(tasks, out)
    print(f"wrote {len(tasks)} tasks to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
