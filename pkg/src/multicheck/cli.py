"""Command-line experiment runner: generate, train, eval, compare, report, gradcheck."""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import ExperimentConfig, git_blob_hash, input_fingerprint, load_config, parse_config
from .data import (
    LABEL_NAMES,
    SPLITS,
    Sample,
    build_vocab,
    encode_samples,
    generate_synthetic,
    label_mapping,
    load_dataset,
    save_dataset,
)
from .errors import InputError, MultiCheckError, NumericError
from .evalstats import (
    classification_report,
    compare_predictions,
    cross_table_csv,
    format_p,
    predict,
    render_comparison,
    render_report,
    write_json,
)
from .model import MultiCheckModel
from .trainer import THREADS_ENV, aggregate_reports, configure_threads, gradient_check, total_loss_fn, train

logger = logging.getLogger("multicheck")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

EPILOG = f"""\
exit codes:
  0  success
  1  configuration error
  2  data error (missing file, schema or compatibility problem)
  3  numeric failure (divergence, non-finite loss, failed gradient check)

environment:
  {THREADS_ENV}  fixes the torch CPU thread count; keep it constant to
  reproduce runs bit for bit
"""

RESOLVED_CONFIG = "resolved_config.ini"
SUMMARY = "summary.json"
COMPARISON = "comparison.json"


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def load_splits(cfg: ExperimentConfig) -> dict[str, list[Sample]]:
    if cfg.data_path is not None:
        return {split: load_dataset(cfg.data_path, split) for split in SPLITS}
    return dict(zip(SPLITS, generate_synthetic(cfg.synthetic)))


def _write_jsonl(rows, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _write_predictions(samples, preds, path: Path) -> None:
    _write_jsonl(({"id": s.id, "gold": int(s.label), "pred": int(p)} for s, p in zip(samples, preds)), path)


def _seed_dirs(run_dir: Path) -> dict[int, Path]:
    dirs = {}
    for d in run_dir.glob("seed_*"):
        if (d / "checkpoint.npz").is_file():
            dirs[int(d.name.split("_", 1)[1])] = d
    if not dirs:
        raise InputError(f"{run_dir} holds no seed_*/checkpoint.npz; is it a train run directory?")
    return dict(sorted(dirs.items()))


def load_run_config(run_dir: str | Path) -> ExperimentConfig:
    path = Path(run_dir) / RESOLVED_CONFIG
    if not path.is_file():
        raise InputError(f"{run_dir} is not a run directory (missing {RESOLVED_CONFIG})")
    return parse_config(path.read_text(encoding="utf-8"))


def _eval_samples(run_dir: Path, dataset: str | None, split: str) -> list[Sample]:
    if dataset:
        return load_dataset(dataset, split)
    return load_splits(load_run_config(run_dir))[split]


def _f1_cells(mean, std) -> list[str]:
    return [f"{m:.4f} ± {s:.4f}" for m, s in zip(mean, std)]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, out: str | Path | None = None, image_mode: str = "file") -> Path:
    """Write train/val/test JSONL (plus images) and a manifest."""
    out = Path(out or cfg.data_path or Path(cfg.out_dir) / "data")
    cfg.synthetic.validate()
    files = {}
    counts = {}
    for split, samples in zip(SPLITS, generate_synthetic(cfg.synthetic)):
        path = save_dataset(samples, out / f"{split}.jsonl", image_mode=image_mode)
        files[split] = git_blob_hash(path.read_bytes())
        counts[split] = {name: sum(int(s.label) == i for s in samples) for i, name in enumerate(LABEL_NAMES)}
    manifest = {
        "spec": cfg.synthetic.to_dict(),
        "seed": cfg.synthetic.seed,
        "label_mapping": label_mapping(),
        "counts": counts,
        "files": files,
        "image_mode": image_mode,
    }
    write_json(manifest, out / "manifest.json")
    return out


def cmd_train(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    """Train every configured seed; write checkpoints, histories and a seed aggregate.

    ``summary.json`` holds only quantities fixed by (config, data, seed), so
    reruns reproduce it byte for byte; wall-clock times go to ``timing.json``.
    """
    cfg.validate()
    run_dir = Path(out or cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    configure_threads()
    splits = load_splits(cfg)
    vocab = build_vocab(splits["train"], cfg.train.max_vocab)
    test_data = encode_samples(splits["test"], vocab, cfg.train.max_len)
    inputs = input_fingerprint(cfg)

    (run_dir / RESOLVED_CONFIG).write_text(cfg.to_ini(), encoding="utf-8")
    write_json(label_mapping(), run_dir / "label_mapping.json")
    write_json(inputs, run_dir / "input_fingerprint.json")
    vocab.save(run_dir / "vocab.txt")

    reports, per_seed, timing = {}, {}, {}
    for seed in cfg.train.seeds:
        seed_dir = run_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        try:
            ckpt, history = train(
                cfg.train, splits["train"], splits["val"], seed, log_path=seed_dir / "train_log.jsonl", vocab=vocab
            )
        except NumericError as exc:
            raise NumericError(f"run {run_dir}, seed {seed}: {exc}") from exc
        timing[str(seed)] = time.perf_counter() - start
        ckpt.extra["arm"] = cfg.arm
        ckpt.save(seed_dir / "checkpoint.npz")
        write_json({"seed": seed, **history.to_dict()}, seed_dir / "history.json")

        preds = predict(ckpt, test_data, cfg.train.eval_batch_size)
        report = classification_report(preds, test_data.labels.numpy())
        reports[seed] = report
        write_json(report.to_dict(), seed_dir / "test_report.json")
        _write_predictions(splits["test"], preds, seed_dir / "test_predictions.jsonl")
        per_seed[str(seed)] = {
            "best_epoch": history.best_epoch,
            "best_val_weighted_f1": history.best_val_f1,
            "epochs_run": len(history.epochs),
            "stop_reason": history.stop_reason,
            "test_weighted_f1": report.weighted_f1,
            "checkpoint_digest": ckpt.digest(),
        }
        logger.info("seed %d: test weighted F1 %.4f (%.1fs)", seed, report.weighted_f1, timing[str(seed)])

    summary = {
        "arm": cfg.arm,
        "contrastive": cfg.train.contrastive_enabled,
        "config_fingerprint": cfg.fingerprint(),
        "input_fingerprint": inputs["fingerprint"],
        "label_mapping": label_mapping(),
        "seeds": list(cfg.train.seeds),
        "per_seed": per_seed,
        "test": aggregate_reports(reports),
    }
    write_json(summary, run_dir / SUMMARY)
    write_json({"seconds_per_seed": timing, "torch_threads": torch.get_num_threads()}, run_dir / "timing.json")
    return run_dir


def cmd_eval(run_dir: str | Path, dataset: str | None = None, split: str = "test", out: str | Path | None = None) -> Path:
    """Per-seed reports and predictions plus an aggregate table (CSV and JSON)."""
    run_dir = Path(run_dir)
    seeds = _seed_dirs(run_dir)
    samples = _eval_samples(run_dir, dataset, split)
    out = Path(out or run_dir / "eval" / split)
    out.mkdir(parents=True, exist_ok=True)
    golds = np.array([int(s.label) for s in samples], dtype=np.int64)
    reports = {}
    for seed, seed_dir in seeds.items():
        preds = predict(Checkpoint.load(seed_dir / "checkpoint.npz"), samples)
        reports[seed] = classification_report(preds, golds)
        write_json(reports[seed].to_dict(), out / f"report_seed_{seed}.json")
        _write_predictions(samples, preds, out / f"predictions_seed_{seed}.jsonl")
        print(f"seed {seed}\n{render_report(reports[seed])}\n")
    agg = aggregate_reports(reports)
    write_json(agg, out / "aggregate.json")
    rows = ["row," + ",".join(LABEL_NAMES) + ",weighted_f1"]
    for seed, rep in reports.items():
        rows.append(f"seed_{seed}," + ",".join(f"{v:.6f}" for v in rep.f1) + f",{rep.weighted_f1:.6f}")
    rows.append("mean," + ",".join(f"{v:.6f}" for v in agg["f1_mean"]) + f",{agg['weighted_f1_mean']:.6f}")
    rows.append("std," + ",".join(f"{v:.6f}" for v in agg["f1_std"]) + f",{agg['weighted_f1_std']:.6f}")
    (out / "table.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"weighted F1 {agg['weighted_f1_mean']:.4f} ± {agg['weighted_f1_std']:.4f} over seeds {agg['seeds']}")
    return out


def _seed_pairs(a: dict[int, Path], b: dict[int, Path]) -> list[tuple[int, int]]:
    common = sorted(set(a) & set(b))
    if common:
        return [(s, s) for s in common]
    # no shared seeds: pair runs positionally in seed order
    return list(zip(sorted(a), sorted(b)))


def cmd_compare(
    run_a: str | Path,
    run_b: str | Path,
    dataset: str | None = None,
    split: str = "test",
    out: str | Path | None = None,
    correction: bool = False,
) -> Path:
    """Paired comparison of baseline run A against model run B.

    One McNemar/Bowker report per seed pair plus a pooled report over all
    pairs. Significance never affects the exit code.
    """
    run_a, run_b = Path(run_a), Path(run_b)
    seeds_a, seeds_b = _seed_dirs(run_a), _seed_dirs(run_b)
    if dataset is None:
        fa = json.loads((run_a / "input_fingerprint.json").read_text())["fingerprint"]
        fb = json.loads((run_b / "input_fingerprint.json").read_text())["fingerprint"]
        if fa != fb:
            raise InputError("runs were trained on different inputs; pass --dataset to compare on a common set")
    samples = _eval_samples(run_a, dataset, split)
    golds = np.array([int(s.label) for s in samples], dtype=np.int64)
    out = Path(out or run_b / "compare" / f"vs_{run_a.name}")
    out.mkdir(parents=True, exist_ok=True)

    pairs, pooled_a, pooled_b = [], [], []
    for sa, sb in _seed_pairs(seeds_a, seeds_b):
        pa = predict(Checkpoint.load(seeds_a[sa] / "checkpoint.npz"), samples)
        pb = predict(Checkpoint.load(seeds_b[sb] / "checkpoint.npz"), samples)
        pooled_a.append(pa)
        pooled_b.append(pb)
        cmp = compare_predictions(pa, pb, golds, correction=correction)
        tag = f"{sa}_{sb}"
        (out / f"pair_{tag}.txt").write_text(render_comparison(cmp) + "\n", encoding="utf-8")
        (out / f"cross_table_{tag}.csv").write_text(cross_table_csv(cmp), encoding="utf-8")
        pairs.append({"seed_a": sa, "seed_b": sb, **cmp.to_dict()})

    pooled = compare_predictions(
        np.concatenate(pooled_a), np.concatenate(pooled_b), np.tile(golds, len(pairs)), correction=correction
    )
    (out / "pooled.txt").write_text(render_comparison(pooled) + "\n", encoding="utf-8")
    (out / "cross_table_pooled.csv").write_text(cross_table_csv(pooled), encoding="utf-8")
    write_json(
        {
            "baseline": run_a.name,
            "model": run_b.name,
            "split": split,
            "n_samples": len(samples),
            "pairs": pairs,
            "pooled": pooled.to_dict(),
        },
        out / COMPARISON,
    )
    print(f"baseline {run_a.name} vs model {run_b.name}, pooled over {len(pairs)} seed pair(s)")
    print(render_comparison(pooled))
    return out


def cmd_report(paths: list[str | Path], out: str | Path | None = None) -> Path:
    """Markdown and CSV summary of train runs (grouped by arm) and comparisons."""
    runs, comparisons = [], []
    for p in map(Path, paths):
        if (p / SUMMARY).is_file():
            runs.append((p, json.loads((p / SUMMARY).read_text())))
        elif (p / COMPARISON).is_file():
            comparisons.append((p, json.loads((p / COMPARISON).read_text())))
        else:
            raise InputError(f"{p} holds neither {SUMMARY} nor {COMPARISON}")
    out = Path(out or "report")
    out.mkdir(parents=True, exist_ok=True)

    md, csv = ["# Experiment report", ""], ["kind,name,arm,metric,mean,std"]
    for arm in sorted({s["arm"] for _, s in runs}):
        md += [f"## Arm: {arm}", ""]
        md.append("| run | seeds | " + " | ".join(LABEL_NAMES) + " | Weighted F1 |")
        md.append("|---" * (len(LABEL_NAMES) + 3) + "|")
        for p, s in runs:
            if s["arm"] != arm:
                continue
            t = s["test"]
            cells = _f1_cells(t["f1_mean"], t["f1_std"])
            wf1 = f"**{t['weighted_f1_mean']:.4f} ± {t['weighted_f1_std']:.4f}**"
            md.append(f"| {p.name} | {len(t['seeds'])} | " + " | ".join(cells) + f" | {wf1} |")
            for name, m, sd in zip(LABEL_NAMES, t["f1_mean"], t["f1_std"]):
                csv.append(f"run,{p.name},{arm},f1_{name},{m:.6f},{sd:.6f}")
            csv.append(f"run,{p.name},{arm},weighted_f1,{t['weighted_f1_mean']:.6f},{t['weighted_f1_std']:.6f}")
        md.append("")
    if comparisons:
        md += ["## Paired comparisons (pooled over seed pairs)", ""]
        md.append("| baseline | model | b | c | McNemar χ² | p | Bowker χ² | df (nominal) | p |")
        md.append("|---" * 9 + "|")
        for p, c in comparisons:
            q = c["pooled"]
            chi = "n/a" if q["mcnemar_chi2"] is None else f"{q['mcnemar_chi2']:.2f}"
            md.append(
                f"| {c['baseline']} | {c['model']} | {q['b']} | {q['c']} | {chi} | {format_p(q['mcnemar_p'])} "
                f"| {q['bowker_chi2']:.2f} | {q['bowker_df']} ({q['bowker_nominal_df']}) | {format_p(q['bowker_p'])} |"
            )
            name = f"{c['baseline']}_vs_{c['model']}"
            csv.append(f"comparison,{name},,b,{q['b']},")
            csv.append(f"comparison,{name},,c,{q['c']},")
            csv.append(f"comparison,{name},,mcnemar_chi2,{'' if q['mcnemar_chi2'] is None else q['mcnemar_chi2']},")
            csv.append(f"comparison,{name},,bowker_chi2,{q['bowker_chi2']},")
        md.append("")
    text = "\n".join(md)
    (out / "report.md").write_text(text, encoding="utf-8")
    (out / "report.csv").write_text("\n".join(csv) + "\n", encoding="utf-8")
    print(text)
    return out


def gradcheck_fixture(cfg: ExperimentConfig, n: int = 2) -> tuple[MultiCheckModel, object]:
    """A seeded model and an ``n``-sample encoded batch drawn from the configured data."""
    if cfg.data_path is not None:
        samples = load_dataset(cfg.data_path, "train")[:n]
    else:
        spec = dataclasses.replace(cfg.synthetic, n_train=n, n_val=0, n_test=0)
        samples = generate_synthetic(spec)[0]
    if len(samples) < n:
        raise InputError(f"gradient check needs {n} training samples, found {len(samples)}")
    vocab = build_vocab(samples, cfg.train.max_vocab)
    batch = encode_samples(samples, vocab, cfg.train.max_len)
    torch.manual_seed(cfg.train.seeds[0])
    model = MultiCheckModel(cfg.train.model, len(vocab), cfg.train.max_len, tuple(batch.claim_image.shape[1:]))
    return model, batch


def cmd_gradcheck(
    cfg: ExperimentConfig,
    precision: str = "double",
    epsilon: float = 1e-5,
    threshold: float = 1e-4,
    n_coords: int = 16,
    out: str | Path | None = None,
):
    configure_threads()
    model, batch = gradcheck_fixture(cfg)
    loss = total_loss_fn(cfg.train.tau, cfg.train.lam, cfg.train.contrastive_enabled)
    report = gradient_check(
        model, batch, loss, epsilon=epsilon, n_coords=n_coords, threshold=threshold, double=precision == "double"
    )
    width = max(len(k) for k in report.errors)
    for name, err in report.errors.items():
        print(f"{name:<{width}}  {err:.3e}  {'ok' if err < threshold else 'FAIL'}")
    print(f"max relative error {report.max_error:.3e} (threshold {threshold:g}, epsilon {epsilon:g}, {precision})")
    if out:
        write_json(
            {"precision": precision, "epsilon": epsilon, "threshold": threshold, "errors": report.errors},
            Path(out),
        )
    report.raise_on_failure()
    return report


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _seeds(raw: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {raw!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _resolve(args) -> ExperimentConfig:
    cfg = copy.deepcopy(load_config(args.config))
    if getattr(args, "seeds", None):
        cfg.train.seeds = args.seeds
    if getattr(args, "contrastive", None):
        cfg.train.contrastive_enabled = args.contrastive == "on"
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multicheck",
        description="Multimodal claim verification experiments on CPU.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("generate", "write a synthetic dataset (train/val/test JSONL + manifest)")
    p.add_argument("--config", help="INI experiment config (defaults when omitted)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--inline-images", action="store_true", help="embed images as base64 instead of .npy files")
    p.set_defaults(func=lambda a: cmd_generate(_resolve(a), a.out, "inline" if a.inline_images else "file"))

    p = add("train", "train one model per seed and aggregate test metrics")
    p.add_argument("--config")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 42,57")
    p.add_argument("--contrastive", choices=("on", "off"), help="override [objective] contrastive")
    p.add_argument("--out", help="run directory (default: [output] dir)")
    p.set_defaults(func=lambda a: cmd_train(_resolve(a), a.out))

    p = add("eval", "evaluate every seed checkpoint of a run")
    p.add_argument("run_dir")
    p.add_argument("--dataset", help="JSONL file or directory (default: the run's own data)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out")
    p.set_defaults(func=lambda a: cmd_eval(a.run_dir, a.dataset, a.split, a.out))

    p = add("compare", "McNemar/Bowker comparison of baseline run A against model run B")
    p.add_argument("run_a", help="baseline run directory")
    p.add_argument("run_b", help="model run directory")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--correction", action="store_true", help="apply Edwards continuity correction")
    p.add_argument("--out")
    p.set_defaults(func=lambda a: cmd_compare(a.run_a, a.run_b, a.dataset, a.split, a.out, a.correction))

    p = add("report", "markdown/CSV summary of run and comparison directories")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=lambda a: cmd_report(a.paths, a.out))

    p = add("gradcheck", "finite-difference check of every parameter gradient")
    p.add_argument("--config")
    p.add_argument("--seeds", type=_seeds, help="first seed initializes the model")
    p.add_argument("--contrastive", choices=("on", "off"))
    p.add_argument("--precision", choices=("single", "double"), default="double")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=16, help="coordinates sampled per tensor")
    p.add_argument("--out", help="write the per-tensor errors as JSON")
    p.set_defaults(
        func=lambda a: cmd_gradcheck(_resolve(a), a.precision, a.epsilon, a.threshold, a.coords, a.out)
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except MultiCheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
