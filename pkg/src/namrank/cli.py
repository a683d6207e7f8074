"""Command-line entry point: ``namrank {gen,analyze,train,eval,ablate}``.

Every command writes a ``manifest.json`` next to its outputs recording the
resolved configuration, input/output SHA-256 digests and wall-clock
timestamps.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

from . import config as cfgio
from .dataio import (ConfigError, LogParseError, SyntheticConfig, build_samples,
                     default_split_timestamp, generate_synthetic, parse_log, write_log)
from .estimator import NAMRanker
from .evaluation import (ABLATION_HEADER, COMPARE_HEADER, METRICS_HEADER, PCOC_HEADER,
                         ablation_rows, compare_models, comparison_rows, evaluate_records,
                         item_mean_scores, metrics_rows, pcoc_table_rows, to_csv, to_text)
from .model import ModelConfig
from .popularity import (PopularityBuckets, assign_buckets, compute_item_stats, hit_rate_at_k,
                         retarget_analysis)
from .training import CheckpointError, TrainConfig

logger = logging.getLogger("namrank")

VARIANTS = (
    ("NAM", True, True),
    ("NAM w/o GlobalNorm", False, True),
    ("NAM w/o IIF based P13n", True, False),
    ("AEM", False, False),
)
HITRATE_METHODS = (("Co-occurrence Frequency", "cooccurrence"), ("Jaccard", "jaccard"),
                   ("Cosine", "cosine"))


class CommandError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, command: str, out_dir, config: dict, seed, inputs: Sequence = ()):
        self.command = command
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.seed = seed
        self.inputs = {str(p): sha256_file(p) for p in inputs}
        self.outputs: list[Path] = []
        self.started = time.time()

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.outputs.append(path)
        return path

    def table(self, stem: str, header, rows) -> None:
        rows = list(rows)
        self.write_text(stem + ".csv", to_csv(header, rows))
        self.write_text(stem + ".txt", to_text(header, rows))

    def add(self, path) -> None:
        self.outputs.append(Path(path))

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": {p.name: sha256_file(p) for p in self.outputs},
            "started": self.started,
            "finished": time.time(),
        }
        path = self.out / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return path


def _read_events(path):
    with open(path, encoding="utf-8") as fh:
        events, diagnostics = parse_log(fh)
    if diagnostics:
        raise CommandError(f"{path}: unparseable log\n  " + "\n  ".join(diagnostics))
    return events


def _kv_list(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or ():
        for part in item.split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise CommandError(f"expected key=value, got {part!r}")
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# --- gen ---------------------------------------------------------------------------


def cmd_gen(args) -> None:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    overrides.update(_kv_list(args.set))
    try:
        cfg = cfgio.load(SyntheticConfig, args.config, overrides)
        events = generate_synthetic(cfg)
    except (ValueError, ConfigError) as exc:
        raise CommandError(f"invalid synthetic config: {exc}") from exc
    run = Run("gen", args.out, asdict(cfg), cfg.seed, [args.config] if args.config else [])
    path = run.out / "events.tsv"
    write_log(events, str(path))
    run.add(path)
    run.finish()
    print(f"wrote {len(events)} events to {path}")


# --- analyze -----------------------------------------------------------------------


def _read_item_scores(path) -> dict[str, float]:
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"item_id", "p_ctcvr"} <= set(reader.fieldnames):
            raise CommandError(f"{path}: expected columns item_id,p_ctcvr")
        return {row["item_id"]: float(row["p_ctcvr"]) for row in reader}


def popularity_table(events, stats, buckets: PopularityBuckets, scores: dict | None = None):
    """Rows of Level, Impressions, ExposurePercentage, pCTCVR, CTCVR, PCOC.

    With ``scores`` (item -> mean predicted pCTCVR) only impressions of
    scored items are counted.
    """
    n_b = len(buckets)
    imps = [0] * n_b
    convs = [0] * n_b
    pred = [0.0] * n_b
    for ev in events:
        if ev.action not in ("impression", "conversion"):
            continue
        if scores is not None and ev.item_id not in scores:
            continue
        b = stats[ev.item_id].bucket
        if ev.action == "impression":
            imps[b] += 1
            if scores is not None:
                pred[b] += scores[ev.item_id]
        else:
            convs[b] += 1
    total = sum(imps) or 1
    rows = []
    for b, label in enumerate(buckets.labels()):
        ctcvr = convs[b] / imps[b] if imps[b] else 0.0
        p = pc = None
        if scores is not None and imps[b]:
            p = pred[b] / imps[b]
            pc = p / ctcvr if ctcvr > 0 else None
        rows.append((label, imps[b], imps[b] / total, p, ctcvr, pc))
    return rows


def cmd_analyze(args) -> None:
    events = _read_events(args.log)
    ks = [int(k) for k in args.k_list.split(",")]
    buckets = PopularityBuckets()
    stats = assign_buckets(compute_item_stats(events), buckets)
    inputs = [args.log] + ([args.scores] if args.scores else [])
    run = Run("analyze", args.out, {"k_list": ks, "n_max": args.n_max,
                                    "boundaries": list(buckets.boundaries)}, None, inputs)
    scores = _read_item_scores(args.scores) if args.scores else None
    run.table("popularity_pcoc", PCOC_HEADER, popularity_table(events, stats, buckets, scores))

    hr_rows = []
    for label, kind in HITRATE_METHODS:
        rates = hit_rate_at_k(events, kind, ks)
        hr_rows.append((label, *(rates[k] for k in ks)))
    run.table("hitrate", ("Method", *(f"HitRate@{k}" for k in ks)), hr_rows)

    samples, _ = build_samples(events, args.n_max)
    rt = retarget_analysis(samples, stats, buckets)
    run.table("retarget", ("Level", "IsRetarget", "Impressions", "ExposureRate", "CTCVR",
                           "Retarget/NonRetarget"),
              [(r.label, r.is_retarget, r.impressions, r.exposure_rate, r.ctcvr, r.ratio) for r in rt])
    run.finish()
    print(f"analysis written to {run.out}")


# --- train / eval -----------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}
    return cfgio.load(TrainConfig, args.train_config, overrides)


def _model_config(args, flags: dict | None = None) -> ModelConfig:
    values = cfgio.read_kv(args.model_config) if args.model_config else {}
    values.update(_kv_list(args.set))
    values.update(_kv_list(args.flags))
    values.update(flags or {})
    return cfgio.build(ModelConfig, values)


def prepare_data(events, split_ts, n_max):
    if split_ts is None:
        split_ts = default_split_timestamp(events)
    train, test = build_samples(events, n_max, split_ts)
    stats = assign_buckets(compute_item_stats([e for e in events if e.timestamp < split_ts]))
    return split_ts, train, test, stats


def fit_model(events, tc: TrainConfig, mc: ModelConfig, split_ts, run: Run | None = None,
              prefix: str = ""):
    split_ts, train, test, stats = prepare_data(events, split_ts, mc.n_max)
    if not train:
        raise CommandError("training split is empty")
    est = NAMRanker.from_configs(mc, tc)
    meta = {"split_ts": split_ts}

    def on_epoch(epoch, _params):
        if run is not None and tc.checkpoint_every and epoch % tc.checkpoint_every == 0:
            path = run.out / f"{prefix}checkpoint_epoch{epoch}.nam"
            est.save(path, extra=meta)
            run.add(path)

    est.fit(train, stats, on_epoch=on_epoch)
    return est, meta, test


def cmd_train(args) -> None:
    events = _read_events(args.log)
    tc = _train_config(args)
    mc = _model_config(args)
    run = Run("train", args.out, {"train": asdict(tc), "model": asdict(mc), "split_ts": args.split_ts},
              tc.seed, [p for p in (args.log, args.train_config, args.model_config) if p])
    est, meta, _ = fit_model(events, tc, mc, args.split_ts, run)
    path = run.out / "checkpoint.nam"
    est.save(path, extra=meta)
    run.add(path)
    run.write_text("history.csv", est.history_.to_csv(include_time=False))
    run.config["split_ts"] = meta["split_ts"]
    run.finish()
    print(f"checkpoint written to {path}")


def write_report(run: Run, report, prefix: str = "") -> None:
    run.table(prefix + "metrics", METRICS_HEADER, metrics_rows(report))
    run.table(prefix + "pcoc", PCOC_HEADER, pcoc_table_rows(report))


def evaluate_model(est: NAMRanker, test):
    if not test:
        raise CommandError("test split is empty")
    records = est.eval_records(test)
    return evaluate_records(records, est.buckets_.labels()), records


def cmd_eval(args) -> None:
    try:
        est = NAMRanker.load(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise CommandError(f"cannot load checkpoint: {exc}") from exc
    events = _read_events(args.log)
    split_ts = args.split_ts if args.split_ts is not None else est.metadata_.get("split_ts")
    if split_ts is None:
        split_ts = default_split_timestamp(events)
    _, test = build_samples(events, est.config_.n_max, split_ts)
    run = Run("eval", args.out, {"split_ts": split_ts}, None, [args.checkpoint, args.log])
    report, records = evaluate_model(est, test)
    write_report(run, report)
    run.write_text("item_scores.csv", to_csv(("item_id", "impressions", "p_ctcvr"),
                                              item_mean_scores(records)))
    run.finish()
    print(to_text(METRICS_HEADER, metrics_rows(report)), end="")


# --- ablate --------------------------------------------------------------------------


def cmd_ablate(args) -> None:
    events = _read_events(args.log)
    tc = _train_config(args)
    base = _model_config(args)
    run = Run("ablate", args.out, {"train": asdict(tc), "model": asdict(base)}, tc.seed,
              [p for p in (args.log, args.train_config, args.model_config) if p])
    reports = {}
    for name, gn, gate in VARIANTS:
        mc = ModelConfig.from_dict({**asdict(base), "use_global_norm": gn, "use_iif_gate": gate})
        slug = name.lower().replace(" ", "_").replace("/", "")
        est, meta, test = fit_model(events, tc, mc, args.split_ts)
        ckpt = run.out / f"{slug}.nam"
        est.save(ckpt, extra=meta)
        run.add(ckpt)
        report, _ = evaluate_model(est, test)
        write_report(run, report, prefix=f"{slug}_")
        reports[name] = report
        logger.info("%s done", name)
    run.table("ablation", ABLATION_HEADER, ablation_rows(reports))
    cmp = compare_models(reports["AEM"], reports["NAM"])
    run.table("pcoc_compare", COMPARE_HEADER, comparison_rows(cmp))
    run.finish()
    print(to_text(ABLATION_HEADER, ablation_rows(reports)), end="")


# --- argument parsing ----------------------------------------------------------------


def _add_train_flags(p) -> None:
    p.add_argument("--train-config", help="key=value TrainConfig file")
    p.add_argument("--model-config", help="key=value ModelConfig file")
    p.add_argument("--split-ts", type=int, default=None,
                   help="impressions before this timestamp train, the rest test "
                        "(default: 80%% impression-time quantile)")
    p.add_argument("--flags", action="append",
                   help="model switches, e.g. use_global_norm=false,use_iif_gate=true")
    p.add_argument("--set", action="append", help="ModelConfig overrides key=value[,key=value]")
    for f in fields(TrainConfig):
        kind = cfgio.parse_bool if f.type in ("bool", bool) else type(f.default)
        p.add_argument(f"--{f.name}", type=kind, default=None, help=f"TrainConfig.{f.name}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="namrank", description="Synthetic logs, popularity analyses, training and evaluation "
                                    "for the normalization attention ranker.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic event log")
    p.add_argument("--config", help="key=value SyntheticConfig file")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", help="SyntheticConfig overrides key=value")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("analyze", help="popularity, hit-rate and retarget tables")
    p.add_argument("log")
    p.add_argument("--out", required=True)
    p.add_argument("--k-list", default="10,20,30")
    p.add_argument("--n-max", type=int, default=30)
    p.add_argument("--scores", help="CSV with item_id,p_ctcvr (e.g. eval's item_scores.csv)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("log")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score the test split with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("log")
    p.add_argument("--out", required=True)
    p.add_argument("--split-ts", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare NAM, its two ablations and AEM")
    p.add_argument("log")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CommandError, ConfigError, LogParseError, ValueError, OSError) as exc:
        print(f"namrank {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
