"""``alibi-surgeon`` command line: pretrain, diagnose, surgery, drift, eval, report, rerun.

Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 property failure
(e.g. collapse not induced).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import svg
from .diagnostics import (
    DiagnosisReport,
    Thresholds,
    column_drift,
    detect_band,
    diagnose,
    drift,
    outside_columns,
    slope_ordering,
    threshold_robustness,
)
from .model import ModelConfig
from .surgery import (
    EmptyTargetError,
    SurgicalPlan,
    iatrogenic_detect,
    operate,
    recovered,
    select_targets,
    trainable_fraction,
)
from .training import (
    Corpus,
    InductionError,
    TrainConfig,
    bundled_corpus,
    chunk,
    default_prompt,
    perplexity,
    pretrain_config,
    pretrain_to_collapse,
    tokenize,
)

log = logging.getLogger("alibi_surgeon")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_PROPERTY = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- io helpers


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items() if k in fields})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def default_out(command: str, seed: int) -> Path:
    root = Path(os.environ.get("ALIBI_SURGEON_HOME", "artifacts"))
    return root / f"{command}-seed{seed}"


def prepare_out(args) -> Path:
    out = Path(args.out) if args.out else default_out(args.command, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_prompt(path) -> list[int]:
    if path is None:
        return default_prompt()
    return tokenize(Path(path).read_bytes().strip())


def load_corpus(path, seq_len: int, heldout_frac: float = 0.1) -> Corpus:
    data = Path(path).read_bytes() if path else bundled_corpus()
    return Corpus.from_bytes(data, seq_len, heldout_frac)


def load_texts(path, raw: bool, max_len: int) -> list[list[int]]:
    data = Path(path).read_bytes()
    if raw:
        return chunk(data, max_len + 1)
    return [tokenize(line) for line in data.splitlines() if line.strip()]


def thresholds_from(args) -> Thresholds:
    return Thresholds(args.healthy_max, args.dead_min, args.low_entropy_max)


def parse_range(s: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in s.split(":"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected A:B, got {s!r}") from e
    if a > b:
        raise argparse.ArgumentTypeError(f"empty range {s!r}")
    return a, b


def parse_heads(s: str) -> list[tuple[int, int]]:
    out = []
    for item in s.split(","):
        item = item.strip().upper().replace("L", "").replace("H", ":")
        try:
            l, h = (int(x) for x in item.split(":"))
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"bad head list {s!r}; use L:H,L:H") from e
        out.append((l, h))
    return out


# ---------------------------------------------------------------- manifests


def _config_hash(command: str, argv: list[str], config: dict | None = None) -> str:
    blob = json.dumps([command, argv, config], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def strip_out(argv: list[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def write_manifest(out: Path, args, started: str, input_ckpt: str | None, output_ckpt: str | None,
                   parent: str | None = None, status: str = "ok", extra: dict | None = None,
                   config: dict | None = None) -> dict:
    argv = strip_out(args.argv)
    m = {
        "command": args.command,
        "argv": argv,
        "cwd": os.getcwd(),
        "config_hash": _config_hash(args.command, argv, config),
        "seed": args.seed,
        "input_checkpoint": input_ckpt,
        "output_checkpoint": output_ckpt,
        "parent_manifest": parent,
        "started": started,
        "finished": _now(),
        "tool_version": __version__,
        "status": status,
    }
    if extra:
        m.update(extra)
    m["manifest_id"] = hashlib.sha256(
        json.dumps([m["config_hash"], input_ckpt, output_ckpt, parent]).encode()).hexdigest()[:16]
    write_json(out / "manifest.json", m)
    return m


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def report_figures(report: DiagnosisReport, out: Path, stem: str = "report") -> list[int]:
    band = detect_band(report)
    (out / f"{stem}_heatmap.svg").write_text(
        svg.heatmap(report.bos, f"BOS mass by layer x head ({report.checkpoint_id})", band=band,
                    marks=report.sick()))
    text, counts = svg.histogram(report.bos.ravel(), "BOS mass distribution", threshold=report.thresholds.healthy_max)
    (out / f"{stem}_histogram.svg").write_text(text)
    return counts


def save_report(report: DiagnosisReport, out: Path, stem: str = "report") -> dict:
    doc = report.to_json()
    write_json(out / f"{stem}.json", doc)
    report_figures(report, out, stem)
    return doc


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    if not args.config:
        raise UsageError("pretrain needs --config FILE")
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    started = _now()
    conf = read_json(cfg_path)
    model_cfg = ModelConfig(**conf.get("model", {}))
    train_over = dict(conf.get("train", {}))
    train_over["seed"] = args.seed
    if args.steps is not None:
        train_over["total_steps"] = args.steps
    tcfg = pretrain_config(**train_over)
    corpus = load_corpus(conf.get("corpus"), tcfg.seq_len, conf.get("heldout_frac", 0.1))
    prompt = load_prompt(conf.get("prompt"))
    th = Thresholds(**conf.get("thresholds", {}))
    out = prepare_out(args)
    try:
        weights, report, res = pretrain_to_collapse(model_cfg, corpus, tcfg, prompt, th, strict=False)
    except (ValueError, FloatingPointError) as e:
        log.error("pretraining failed: %s", e)
        return EXIT_RUNTIME
    cid = ckpt.save(weights, out / "stock.ckpt")
    report.checkpoint_id = cid
    save_report(report, out, "stock_report")
    write_csv(out / "loss_trace.csv", res.loss_trace, ["step", "lr", "loss", "grad_norm", "clipped"])
    write_csv(out / "eval_trace.csv", res.eval_trace, ["step", "split", "ppl"])
    rho = slope_ordering(report)
    band = detect_band(report)
    ok = rho > 0
    write_manifest(out, args, started, None, cid, status="ok" if ok else "induction-failed", config=conf,
                   extra={"spearman": rho, "band": list(band) if band else [], "counts": report.counts()})
    print(f"stock checkpoint {cid}: spearman={rho:.3f} band={band} counts={report.counts()}")
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_diagnose(args) -> int:
    started = _now()
    weights = ckpt.load(args.checkpoint)
    cid = ckpt.checkpoint_id(args.checkpoint)
    prompt = load_prompt(args.prompt)
    report = diagnose(weights, prompt, thresholds_from(args), checkpoint_id=cid)
    out = prepare_out(args)
    save_report(report, out)
    write_manifest(out, args, started, cid, None, extra={
        "robustness": threshold_robustness(report.bos), "counts": report.counts()})
    band = detect_band(report)
    print(f"{cid}: counts={report.counts()} band={list(band) if band else []} "
          f"robustness={threshold_robustness(report.bos):.3f}")
    return EXIT_OK


def _surgery_train_config(args) -> TrainConfig:
    return TrainConfig(
        lr_peak=args.lr, accum_steps=args.accum, clip_norm=args.clip, seq_len=args.seq_len,
        epochs=args.epochs, seed=args.seed, total_steps=args.steps, warmup_steps=args.warmup,
        eval_interval=args.eval_interval,
    )


def cmd_surgery(args) -> int:
    started = _now()
    weights = ckpt.load(args.checkpoint)
    in_id = ckpt.checkpoint_id(args.checkpoint)
    parent = None
    pass_index = 1
    if args.pass2:
        prior = read_json(args.pass2)
        if prior.get("output_checkpoint") != in_id:
            log.error("lineage mismatch: %s was not produced by manifest %s", args.checkpoint, args.pass2)
            return EXIT_RUNTIME
        parent = prior.get("manifest_id")
        pass_index = 2
    policy = args.policy or ("residual" if args.pass2 else "band")
    prompt = load_prompt(args.prompt)
    th = thresholds_from(args)
    tcfg = _surgery_train_config(args)
    corpus = load_corpus(args.corpus, tcfg.seq_len)
    stock = diagnose(weights, prompt, th, checkpoint_id=in_id)
    layers = range(args.layers[0], args.layers[1] + 1) if args.layers else None
    try:
        plan = select_targets(stock, policy, band=args.band, heads=args.heads, column=args.index,
                              add_columns=args.add_column or (), layers=layers, seed=args.seed,
                              pass_index=pass_index)
    except EmptyTargetError as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    out = prepare_out(args)
    save_report(stock, out, "report_stock")
    plan_doc = plan.to_json()
    plan_doc["negative_control"] = bool(args.negative_control)
    write_json(out / "plan.json", plan_doc)

    eval_sets = {"heldout": corpus.heldout}
    for spec in args.eval or ():
        name, _, path = spec.partition("=")
        eval_sets[name] = load_texts(path, False, weights.config.max_seq_len)
    outcome = operate(weights, plan, corpus, tcfg, prompt, th, reinit=not args.negative_control,
                      train_out_bias=args.train_out_bias, eval_sets=eval_sets)
    res = outcome.result
    epochs = []
    for e, w in res.checkpoints:
        w.meta.update({"kind": "surgery", "pass": pass_index, "epoch": e, "parent": in_id})
        cid = ckpt.save(w, out / f"epoch_{e:03d}.ckpt")
        rep = outcome.reports[e]
        rep.checkpoint_id = cid
        save_report(rep, out, f"report_e{e:03d}")
        got, n = outcome.recovery(e)
        ppl = {r["split"]: r["ppl"] for r in res.eval_trace if r["step"] == res.epoch_steps[e]}
        epochs.append({"epoch": e, "checkpoint": cid, "recovered": got, "targets": n,
                       "counts": rep.counts(), "ppl": ppl})
    best = res.best()
    best_id = ckpt.save(best, out / "best.ckpt")
    best_rep = outcome.reports[res.best_epoch]
    summary = {
        "pass": pass_index,
        "policy": plan.policy,
        "negative_control": bool(args.negative_control),
        "targets": len(plan.targets),
        "kept_frozen": len(plan.kept_frozen),
        "trainable_fraction": trainable_fraction(outcome.masks),
        "best_epoch": res.best_epoch,
        "best_checkpoint": best_id,
        "epochs": epochs,
        "recovered_best": len(recovered(plan, best_rep)),
        "iatrogenic": [list(x) for x in sorted(iatrogenic_detect(stock, best_rep))],
        "stock_counts": stock.counts(),
    }
    write_json(out / "summary.json", summary)
    write_csv(out / "loss_trace.csv", res.loss_trace, ["step", "lr", "loss", "grad_norm", "clipped"])
    write_csv(out / "eval_trace.csv", res.eval_trace, ["step", "split", "ppl"])
    _trajectory_figure(res.eval_trace, out / "ppl_trajectory.svg")
    write_manifest(out, args, started, in_id, best_id, parent=parent,
                   extra={"plan": plan_doc, "recovered_best": summary["recovered_best"]})
    last = epochs[-1]
    print(f"pass {pass_index} {plan.policy}: {last['recovered']}/{last['targets']} targets healthy at "
          f"epoch {last['epoch']}; best epoch {res.best_epoch} -> {best_id}"
          + ("  [negative control: no reinit]" if args.negative_control else ""))
    return EXIT_OK


def _trajectory_figure(trace, path: Path, hline: float | None = None) -> None:
    series: dict[str, tuple[list, list]] = {}
    for r in trace:
        xs, ys = series.setdefault(str(r["split"]), ([], []))
        xs.append(float(r["step"]))
        ys.append(float(r["ppl"]))
    path.write_text(svg.line_chart(series, "Perplexity trajectory", ylabel="PPL", hline=hline))


def cmd_drift(args) -> int:
    started = _now()
    stock = DiagnosisReport.from_json(read_json(args.stock))
    posts = [DiagnosisReport.from_json(read_json(p)) for p in args.post]
    labels = args.labels.split(",") if args.labels else [f"P{i + 1}" for i in range(len(posts))]
    if len(labels) != len(posts):
        raise UsageError("--labels must name every post report")
    plan = SurgicalPlan.from_json(read_json(args.plan)) if args.plan else None
    band = args.band
    if band is None and plan is not None and plan.targets:
        cols = sorted({h for _, h in plan.targets | plan.kept_frozen})
        band = (cols[0], cols[-1])
    if band is None:
        band = detect_band(stock)
    band_cols = set(range(band[0], band[1] + 1)) if band else set()
    if plan is not None:
        frozen = set(plan.kept_frozen)
    else:
        frozen = {(l, h) for l, h in stock.healthy() if h in band_cols}
    outside = outside_columns(band_cols)
    out = prepare_out(args)
    summary = {"band": list(band) if band else [], "threshold": args.threshold, "posts": {}}
    try:
        for label, post in zip(labels, posts):
            s_out = drift(stock, post, args.threshold, outside)
            s_in = drift(stock, post, args.threshold, frozen)
            rows = []
            for r in s_out.records:
                zone = "outside" if r.zone else ("in-band-frozen" if (r.layer, r.head) in frozen else "band")
                rows.append({"layer": r.layer, "head": r.head, "zone": zone, "delta": r.delta,
                             "drifting": int(r.drifting)})
            write_csv(out / f"drift_{label}.csv", rows, ["layer", "head", "zone", "delta", "drifting"])
            summary["posts"][label] = {"outside": s_out.to_json(), "in_band_frozen": s_in.to_json()}
        cols = column_drift(stock, posts, frozen) if frozen else []
    except ValueError as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    summary["columns"] = [{"head": c.head, "n_frozen": c.n_frozen, "means": list(c.means), "trend": c.trend}
                          for c in cols]
    write_json(out / "drift_summary.json", summary)
    (out / "drift_summary.txt").write_text(format_drift_table(summary, labels))
    drift_figures(stock, posts, frozen, cols, labels, out)
    write_manifest(out, args, started, None, None)
    print(format_drift_table(summary, labels), end="")
    return EXIT_OK


def format_drift_table(summary: dict, labels: list[str]) -> str:
    lines = ["metric\t" + "\t".join(labels)]
    P = summary["posts"]
    for zone, name in (("outside", "outside-zone"), ("in_band_frozen", "in-band frozen")):
        lines.append(f"{name} drifting heads\t" + "\t".join(
            f"{P[l][zone]['count']}/{P[l][zone]['zone_size']}" for l in labels))
        lines.append(f"{name} mean |delta| (zone)\t" + "\t".join(f"{P[l][zone]['mean_abs_zone']:.4f}" for l in labels))
        lines.append(f"{name} mean |delta| (drifters)\t" + "\t".join(
            f"{P[l][zone]['mean_abs_drifters']:.4f}" for l in labels))
        lines.append(f"{name} worst case\t" + "\t".join(P[l][zone]["worst"] for l in labels))
    for c in summary.get("columns", []):
        means = " -> ".join(f"{m:.3f}" for m in c["means"])
        lines.append(f"column H{c['head']} ({c['n_frozen']} frozen)\t{means}\t{c['trend']}")
    return "\n".join(lines) + "\n"


def drift_figures(stock, posts, frozen, cols, labels, out: Path) -> None:
    grid = np.full(stock.shape, np.nan)
    last = posts[-1]
    for l, h in frozen:
        grid[l, h] = abs(last.bos[l, h] - stock.bos[l, h])
    vmax = max(float(np.nanmax(grid)) if frozen else 0.0, 0.05)
    (out / "frozen_drift_heatmap.svg").write_text(
        svg.heatmap(grid, f"|delta| of frozen heads ({labels[-1]})", vmax=vmax))
    series = {f"H{c.head}": (list(range(1, len(c.means) + 1)), list(c.means)) for c in cols}
    (out / "column_drift.svg").write_text(
        svg.line_chart(series, "Column-wise frozen-head drift", xlabel="checkpoint", ylabel="mean |delta|"))


def cmd_eval(args) -> int:
    started = _now()
    out = prepare_out(args)
    if args.trajectory:
        trace = read_csv(args.trajectory)
        rows = [{"step": int(r["step"]), "ppl": float(r["ppl"])} for r in trace
                if r["split"] == args.trajectory_split]
        write_csv(out / "trajectory.csv", rows, ["step", "ppl"])
        _trajectory_figure([dict(r, split=args.trajectory_split) for r in rows], out / "trajectory.svg",
                           hline=args.baseline)
        write_manifest(out, args, started, None, None)
        for r in rows:
            print(f"{r['step']}\t{r['ppl']:.4f}")
        return EXIT_OK
    if not args.checkpoint or not args.split:
        raise UsageError("eval needs checkpoints and at least one --split NAME=FILE")
    rows = []
    for path in args.checkpoint:
        weights = ckpt.load(path)
        cid = ckpt.checkpoint_id(path)
        for spec in args.split:
            name, sep, fpath = spec.partition("=")
            if not sep:
                raise UsageError(f"--split expects NAME=FILE, got {spec!r}")
            texts = load_texts(fpath, args.raw, weights.config.max_seq_len)
            rows.append({"checkpoint": cid, "split": name, "ppl": perplexity(weights, texts)})
    write_csv(out / "ppl.csv", rows, ["checkpoint", "split", "ppl"])
    write_manifest(out, args, started, None, None)
    splits = list(dict.fromkeys(r["split"] for r in rows))
    print("checkpoint\t" + "\t".join(splits))
    for cid in dict.fromkeys(r["checkpoint"] for r in rows):
        vals = {r["split"]: r["ppl"] for r in rows if r["checkpoint"] == cid}
        print(cid + "\t" + "\t".join(f"{vals[s]:.2f}" for s in splits))
    return EXIT_OK


def cmd_report(args) -> int:
    """Regenerate figures from the JSON/CSV artifacts in a run directory."""
    d = Path(args.directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {d}")
    made = 0
    for p in sorted(d.glob("*report*.json")):
        report_figures(DiagnosisReport.from_json(read_json(p)), d, p.stem)
        made += 1
    if (d / "eval_trace.csv").exists():
        _trajectory_figure(read_csv(d / "eval_trace.csv"), d / "ppl_trajectory.svg")
        made += 1
    if (d / "drift_summary.json").exists():
        s = read_json(d / "drift_summary.json")
        series = {f"H{c['head']}": (list(range(1, len(c["means"]) + 1)), c["means"]) for c in s["columns"]}
        (d / "column_drift.svg").write_text(
            svg.line_chart(series, "Column-wise frozen-head drift", xlabel="checkpoint", ylabel="mean |delta|"))
        made += 1
    print(f"regenerated figures for {made} artifacts in {d}")
    return EXIT_OK


def cmd_rerun(args) -> int:
    m = read_json(args.manifest)
    argv = list(m["argv"]) + ["--out", str(Path(args.out).resolve())]
    cwd = os.getcwd()
    try:
        os.chdir(m.get("cwd", cwd))
        return main(argv)
    finally:
        os.chdir(cwd)


# ---------------------------------------------------------------- parser


def _add_thresholds(p):
    p.add_argument("--healthy-max", type=float, default=0.50)
    p.add_argument("--dead-min", type=float, default=0.95)
    p.add_argument("--low-entropy-max", type=float, default=0.50)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alibi-surgeon", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory (default: $ALIBI_SURGEON_HOME/<command>-seed<seed>)")
        p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("pretrain", help="train a toy model until its heads collapse")
    p.add_argument("--config", help="JSON file with model/train/corpus settings")
    p.add_argument("--steps", type=int, help="override the optimizer step budget")
    common(p)

    p = sub.add_parser("diagnose", help="classify every head of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--prompt", help="diagnostic prompt file (default: bundled prompt)")
    _add_thresholds(p)
    common(p)

    p = sub.add_parser("surgery", help="reinitialize and retrain selected heads")
    p.add_argument("checkpoint")
    p.add_argument("--policy", choices=["band", "column", "residual", "explicit"])
    p.add_argument("--index", type=int, help="column index for --policy column")
    p.add_argument("--heads", type=parse_heads, help="explicit heads, e.g. 3:5,4:7")
    p.add_argument("--band", type=parse_range, help="explicit band columns A:B")
    p.add_argument("--add-column", type=int, action="append", help="also target a whole column")
    p.add_argument("--layers", type=parse_range, help="restrict to layers A:B")
    p.add_argument("--negative-control", action="store_true", help="masks without reinitialization")
    p.add_argument("--pass2", metavar="MANIFEST", help="chain from a prior surgery manifest")
    p.add_argument("--train-out-bias", action="store_true")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--steps", type=int, help="total optimizer steps (overrides epochs)")
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--accum", type=int, default=8)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--eval", action="append", metavar="NAME=FILE", help="extra eval split (one text per line)")
    p.add_argument("--corpus")
    p.add_argument("--prompt")
    _add_thresholds(p)
    common(p)

    p = sub.add_parser("drift", help="BOS-mass drift between a stock report and post reports")
    p.add_argument("stock")
    p.add_argument("post", nargs="+")
    p.add_argument("--plan", help="plan.json (its kept-frozen heads form the in-band zone)")
    p.add_argument("--band", type=parse_range, help="band columns A:B; outside-zone is the complement")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--labels", help="comma-separated names for the post reports")
    common(p)

    p = sub.add_parser("eval", help="perplexity per checkpoint and split")
    p.add_argument("checkpoint", nargs="*")
    p.add_argument("--split", action="append", metavar="NAME=FILE")
    p.add_argument("--raw", action="store_true", help="treat split files as raw bytes instead of one text per line")
    p.add_argument("--trajectory", metavar="EVAL_TRACE_CSV", help="emit a step,ppl trajectory from a trace")
    p.add_argument("--trajectory-split", default="heldout")
    p.add_argument("--baseline", type=float, help="reference PPL line for the trajectory figure")
    common(p)

    p = sub.add_parser("report", help="regenerate figures from a run directory")
    p.add_argument("directory")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("rerun", help="re-execute a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    return ap


COMMANDS = {
    "pretrain": cmd_pretrain, "diagnose": cmd_diagnose, "surgery": cmd_surgery, "drift": cmd_drift,
    "eval": cmd_eval, "report": cmd_report, "rerun": cmd_rerun,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.error(str(e)) if False else print(f"alibi-surgeon: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ckpt.CorruptCheckpointError, FileNotFoundError, ValueError, FloatingPointError) as e:
        print(f"alibi-surgeon: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def console() -> None:  # pragma: no cover
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    console()
