"""Command-line driver: ``mergeselect <subcommand> ...``.

Every subcommand writes a ``manifest.json`` next to its output recording the
arguments, seeds and SHA-256 digests of the inputs and outputs it touched.
Errors exit nonzero with a single ``error:`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .catalog import CatalogConfig, generate_catalog, load_catalog, save_catalog
from .checkpoint import ArchConfig, save_checkpoint
from .features import build_similarity_table, load_feature_csv
from .harness import (
    CampaignConfig,
    ReportBundle,
    file_digest,
    run_bandit_campaign,
    run_multiway_campaign,
    run_offline_campaign,
)
from .operators import MergePlan, execute_plan
from .planning import rank_plans, write_scored_plans
from .selector import SelectorHyperparams, build_pairwise_dataset, load_model, save_model, train_selector

log = logging.getLogger("mergeselect")

VERSION = "0.1.0"


def _digests(paths: Sequence[Path]) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file() and q.name not in ("manifest.json",)) if p.is_dir() else [p]
        for f in files:
            if f.exists():
                out[str(f)] = file_digest(f)
    return out


def write_manifest(where: Path, args: argparse.Namespace, inputs: Sequence[Path], outputs: Sequence[Path], extra=None) -> Path:
    where = Path(where)
    target = where / "manifest.json" if where.is_dir() else where.with_name(where.name + ".run.json")
    record = {
        "command": args.command,
        "version": VERSION,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
    }
    if extra:
        record.update(extra)
    target.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return target


def _parse_arch(spec: str | None) -> ArchConfig:
    """``key=value`` pairs separated by commas, or a JSON object."""
    if not spec:
        return ArchConfig()
    spec = spec.strip()
    if spec.startswith("{"):
        return ArchConfig.from_dict(json.loads(spec))
    fields = {f.name for f in dataclasses.fields(ArchConfig)}
    kw = {}
    for part in spec.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in fields or not value:
            raise ValueError(f"bad --arch entry {part!r}; fields are {sorted(fields)}")
        kw[key] = int(value)
    return ArchConfig(**kw)


def _campaign_config(args) -> CampaignConfig:
    hp = SelectorHyperparams(seed=args.seed)
    return CampaignConfig(
        n_train_pairs=getattr(args, "pairs", 240),
        n_test_pairs=getattr(args, "test_pairs", 60),
        n_multiway=getattr(args, "n", 20),
        off_task_fraction=getattr(args, "off_task_fraction", 0.5),
        seed=args.seed,
        hyperparams=hp,
    )


# -- subcommands ----------------------------------------------------------


def cmd_generate(args) -> int:
    config = CatalogConfig.regimes() if args.preset == "regimes" else CatalogConfig()
    cat = generate_catalog(_parse_arch(args.arch), args.tasks, args.experts_per_task, args.probe_size, args.eval_size, args.seed, config)
    out = Path(args.out)
    save_catalog(cat, out)
    write_manifest(out, args, [], [out], {"seeds": {"catalog": args.seed}, "catalog_config": config.to_dict()})
    print(f"wrote {len(cat.ids)} checkpoints over {len(cat.tasks)} tasks to {out}")
    return 0


def cmd_features(args) -> int:
    cat = load_catalog(args.catalog)
    table = build_similarity_table(cat)
    out = Path(args.out)
    table.to_csv(out)
    write_manifest(out, args, [Path(args.catalog)], [out, out.with_suffix(".header.json")])
    print(f"wrote {len(table.entries)} pair rows to {out}")
    return 0


def cmd_train_selector(args) -> int:
    cat = load_catalog(args.catalog)
    inputs = [Path(args.catalog)]
    if args.features:
        table = load_feature_csv(args.features)
        inputs.append(Path(args.features))
    else:
        table = build_similarity_table(cat)
    config = _campaign_config(args)
    dataset = build_pairwise_dataset(
        cat,
        table,
        args.pairs,
        args.seed,
        n_test=args.test_pairs,
        val_fraction=config.val_fraction,
        tau=config.tau,
        orientation=config.orientation,
        off_task_fraction=config.off_task_fraction,
    )
    model = train_selector(dataset, config.hyperparams, cat.tasks)
    out = Path(args.out)
    save_model(model, out)
    balance = dataset.label_balance()
    write_manifest(out, args, inputs, [p for p in out.parent.glob(out.name + ".*") if not p.name.endswith(".run.json")], {"seeds": {"dataset": args.seed, "selector": args.seed}, "label_balance": balance, "model_digest": model.digest()})
    print(f"trained selector on {len(dataset.split('train'))} pairs; label balance {balance}")
    return 0


def cmd_select(args) -> int:
    cat = load_catalog(args.catalog)
    model = load_model(args.model_file)
    ids = [m.strip() for m in args.models.split(",") if m.strip()]
    task_encoding = bool(model.metadata.get("task_encoding", True))
    table = build_similarity_table(cat, ids=ids)
    scores = rank_plans(ids, table, model, args.task, args.mode, args.max_candidates, args.seed, task_encoding=task_encoding)
    if args.dump:
        write_scored_plans(scores, args.dump)
    print(scores[0].plan.to_json())
    return 0


def cmd_merge(args) -> int:
    cat = load_catalog(args.catalog)
    plan = MergePlan.from_dict(json.loads(Path(args.plan).read_text()))
    merged = execute_plan(plan, cat)
    out = Path(args.out)
    save_checkpoint(merged, out)
    write_manifest(out, args, [Path(args.plan)], [p for p in out.parent.glob(out.name + ".*") if not p.name.endswith(".run.json")])
    print(f"wrote merged checkpoint {merged.digest()[:16]} to {out}")
    return 0


def _write_bundle(report: ReportBundle, args, inputs, seeds) -> int:
    out = report.write(args.out)
    write_manifest(out, args, inputs, [out], {"seeds": seeds})
    for method, row in report.summary().items():
        print(f"{method:14s} macro GapClosed {row['gap_closed']['macro']:8.2f}")
    return 0


def cmd_eval_offline(args) -> int:
    cat = load_catalog(args.catalog)
    arts = run_offline_campaign(cat, _campaign_config(args))
    return _write_bundle(arts.report, args, [Path(args.catalog)], {"campaign": args.seed})


def cmd_eval_multiway(args) -> int:
    cat = load_catalog(args.catalog)
    config = _campaign_config(args)
    arts = run_offline_campaign(cat, config)
    report = run_multiway_campaign(cat, args.k, config, arts.selector, arts.table)
    return _write_bundle(report, args, [Path(args.catalog)], {"campaign": args.seed})


def cmd_bandit(args) -> int:
    cat = load_catalog(args.catalog)
    policies = [p.strip() for p in args.policy.split(",")]
    shift = args.shift_task or cat.tasks[-1]
    report = run_bandit_campaign(cat, shift, policies, args.rounds, args.seed, _campaign_config(args), k=args.k)
    out = report.write(args.out)
    write_manifest(out, args, [Path(args.catalog)], [out], {"seeds": {"online": args.seed, "warm_start": args.seed}})
    for policy, blog in report.regret_traces.items():
        print(f"{policy:8s} cumulative regret {blog.final_regret:.4f} after {len(blog.rounds)} rounds")
    return 0


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}" if isinstance(v, float) else str(v)


def cmd_report(args) -> int:
    src = Path(args.input)
    summary_path = src / "summary.json"
    if not summary_path.exists():
        raise FileNotFoundError(f"{summary_path} not found")
    summary = json.loads(summary_path.read_text())
    out = Path(args.out) if args.out else src / "plots"
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    metrics = ("gap_closed", "delta_expert", "delta_aux", "score")
    if summary:
        lines.append(f"{'method':14s}" + "".join(f"{m:>14s}" for m in metrics))
        for method, row in summary.items():
            lines.append(f"{method:14s}" + "".join(f"{row[m]['macro']:14.3f}" for m in metrics))
        tasks = sorted({t for row in summary.values() for t in row["gap_closed"]["per_task"]})
        with (out / "gap_closed_by_task.csv").open("w") as fh:
            fh.write("method," + ",".join(tasks) + ",macro\n")
            for method, row in summary.items():
                per = row["gap_closed"]["per_task"]
                fh.write(method + "," + ",".join(repr(per.get(t, float("nan"))) for t in tasks) + f",{row['gap_closed']['macro']!r}\n")
    confusion = src / "confusion.json"
    if confusion.exists():
        for name, rep in json.loads(confusion.read_text()).items():
            lines.append(f"\n{name}: accuracy {rep['accuracy']:.3f} over {rep['n']} pairs")
            for row in rep["confusion"]:
                lines.append("  " + " ".join(f"{c:5d}" for c in row))
    regrets = sorted(src.glob("regret_*.csv"))
    if regrets:
        lines.append("")
        traces = {}
        for p in regrets:
            rows = [line.split(",") for line in p.read_text().splitlines()[1:]]
            traces[p.stem[len("regret_"):]] = [float(r[-1]) for r in rows]
        for policy, trace in traces.items():
            lines.append(f"{policy:8s} final cumulative regret {trace[-1]:.4f}")
        n = max(len(t) for t in traces.values())
        with (out / "regret_traces.csv").open("w") as fh:
            fh.write("round," + ",".join(traces) + "\n")
            for i in range(n):
                fh.write(f"{i}," + ",".join(repr(t[i]) if i < len(t) else "" for t in traces.values()) + "\n")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    write_manifest(out, args, [src], [out])
    sys.stdout.write(text)
    return 0


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mergeselect", description="Similarity-driven merge selection on synthetic catalogs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a seeded catalog of checkpoints")
    g.add_argument("--arch", default=None, help="e.g. vocab_size=64,d_model=32 or a JSON object")
    g.add_argument("--tasks", type=int, default=4)
    g.add_argument("--experts-per-task", type=int, default=6)
    g.add_argument("--probe-size", type=int, default=16)
    g.add_argument("--eval-size", type=int, default=64)
    g.add_argument("--preset", choices=["default", "regimes"], default="regimes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("features", help="export the pairwise similarity table")
    f.add_argument("--catalog", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_features)

    t = sub.add_parser("train-selector", help="train the operator selector")
    t.add_argument("--catalog", required=True, help="catalog used to execute merges for labels")
    t.add_argument("--features", default=None, help="feature CSV from 'features'; recomputed if omitted")
    t.add_argument("--pairs", type=int, default=240)
    t.add_argument("--test-pairs", type=int, default=60)
    t.add_argument("--off-task-fraction", type=float, default=0.5, help="share of training pairs with no on-task parent")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_selector)

    s = sub.add_parser("select", help="score merge plans and print the best one")
    s.add_argument("--catalog", required=True)
    s.add_argument("--models", required=True, help="comma-separated checkpoint ids")
    s.add_argument("--task", required=True)
    s.add_argument("--model-file", required=True)
    s.add_argument("--mode", choices=["exhaustive", "sampled"], default="exhaustive")
    s.add_argument("--max-candidates", type=int, default=24)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dump", default=None, help="write every scored plan as JSONL")
    s.set_defaults(func=cmd_select)

    m = sub.add_parser("merge", help="execute a plan JSON")
    m.add_argument("--catalog", required=True)
    m.add_argument("--plan", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    for name, func in (("eval-offline", cmd_eval_offline), ("eval-multiway", cmd_eval_multiway)):
        e = sub.add_parser(name)
        e.add_argument("--catalog", required=True)
        e.add_argument("--pairs", type=int, default=240)
        e.add_argument("--test-pairs", type=int, default=60)
        e.add_argument("--off-task-fraction", type=float, default=0.5, help="share of training pairs with no on-task parent")
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out", required=True)
        if name == "eval-multiway":
            e.add_argument("--k", type=int, choices=[3, 4], default=3)
            e.add_argument("--n", type=int, default=20, help="number of k-way configurations")
        e.set_defaults(func=func)

    b = sub.add_parser("bandit", help="online operator selection under a task shift")
    b.add_argument("--catalog", required=True)
    b.add_argument("--policy", default="lints,linucb,uniform,oracle", help="comma-separated subset of lints,linucb,uniform,oracle")
    b.add_argument("--rounds", type=int, default=60)
    b.add_argument("--shift-task", default=None, help="defaults to the catalog's last task")
    b.add_argument("--k", type=int, default=2)
    b.add_argument("--pairs", type=int, default=240)
    b.add_argument("--off-task-fraction", type=float, default=0.5, help="share of training pairs with no on-task parent")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bandit)

    r = sub.add_parser("report", help="render a report directory to text and plot-ready CSVs")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, no traceback
        if args.verbose:
            log.exception("failed")
        text = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        msg = str(text).splitlines()[0] if str(text) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
