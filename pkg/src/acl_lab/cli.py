"""acl-lab command line: gen-data, train, probe, metrics, sweep.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import csv
import datetime as dt
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ARTIFACT_CHOICES, config_to_text, load_config, with_overrides
from .data import LabeledData, audio_features, load_wav_corpus, read_dataset_csv, train_test_split, write_dataset_csv
from .encoder import embed, load_checkpoint, save_checkpoint
from .errors import (ACLError, CheckpointError, ConfigError, DataError, NumericError,
                     TrainingDiverged)
from .metrics import LabeledEmbeddings, class_wise_accuracy, linear_probe, metric_report
from .training import load_labeled, run, sweep, thread_limit, write_records, write_sweep

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

RECORDS = "records.csv"
CHECKPOINT = "checkpoint.acl"
MANIFEST = "manifest.json"


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _config(args):
    cfg = load_config(args.config)
    return with_overrides(cfg, seed=args.seed, output_dir=args.output_dir)


def _outdir(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {p}: {exc}") from exc
    return p


def _finite_or_none(x):
    x = float(x)
    return x if np.isfinite(x) else None


def cmd_gen_data(args):
    cfg = _config(args)
    out = _outdir(cfg.output_dir)
    if cfg.get("dataset.kind") == "audio":
        audio = cfg.audio_config()
        corpus = load_wav_corpus(cfg.get("dataset.path"), audio)
        data = LabeledData(audio_features(corpus, audio.target_frames), corpus.labels)
        train, test = train_test_split(data, cfg.get("dataset.test_fraction"), cfg.get("dataset.seed"))
    else:
        train, test = load_labeled(cfg)
        data = LabeledData(np.vstack([train.x, test.x]), np.concatenate([train.labels, test.labels]))
    write_dataset_csv(data, out / "dataset.csv")
    write_dataset_csv(train, out / "train.csv")
    write_dataset_csv(test, out / "test.csv")
    print(f"wrote {len(data)} rows ({len(train)} train / {len(test)} test), dim {data.x.shape[1]} -> {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    out = _outdir(cfg.output_dir)
    started = _now()
    result = run(cfg)
    write_records(result.records, out / RECORDS)
    save_checkpoint(result.params, out / CHECKPOINT)
    final = result.final
    if result.test_predictions is not None:
        _write_class_wise(class_wise_accuracy(result.test_predictions, result.test_labels),
                          out / "class_wise.csv")
    manifest = {
        "version": __version__,
        "started": started,
        "finished": _now(),
        "config": config_to_text(cfg),
        "artifact_choices": list(ARTIFACT_CHOICES),
        "checkpoint": str(out / CHECKPOINT),
        "records": str(out / RECORDS),
        "final": {
            "epoch": final.epoch,
            "loss_total": _finite_or_none(final.loss_total),
            "uniformity": _finite_or_none(final.uniformity),
            "tolerance": _finite_or_none(final.tolerance),
            "probe_acc": _finite_or_none(final.probe_acc),
        },
    }
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    print(f"{cfg.mode} alpha={cfg.loss.alpha!r} tau={cfg.loss.tau!r} epochs={cfg.epochs}: "
          f"U={final.uniformity:.4f} T={final.tolerance:.4f} acc={final.probe_acc:.4f} -> {out}")
    return EXIT_OK


def _write_class_wise(acc, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("class", "accuracy"))
        for k, v in acc.items():
            w.writerow((k, repr(v)))


def cmd_probe(args):
    params = load_checkpoint(args.checkpoint)
    data = read_dataset_csv(args.dataset)
    if data.x.shape[1] != params.tensors["f.0.W"].shape[0]:
        raise DataError(f"dataset has {data.x.shape[1]} features, checkpoint expects "
                        f"{params.tensors['f.0.W'].shape[0]}")
    train, test = train_test_split(data, args.test_fraction, args.split_seed)
    tr = LabeledEmbeddings(embed(params, train.x), train.labels)
    te = LabeledEmbeddings(embed(params, test.x), test.labels)
    acc, pred = linear_probe(tr, te, epochs=args.epochs, lr=args.lr, seed=args.split_seed,
                             return_predictions=True)
    per_class = class_wise_accuracy(pred, test.labels)
    out = _outdir(args.output_dir)
    _write_class_wise(per_class, out / "class_wise.csv")
    print(f"probe accuracy {acc:.4f}")
    for k, v in per_class.items():
        print(f"  class {k}: {100 * v:.1f}%")
    return EXIT_OK


def cmd_metrics(args):
    data = read_dataset_csv(args.embeddings)
    report = metric_report(LabeledEmbeddings(data.x, data.labels), args.t, args.normalization)
    text = report.to_csv()
    sys.stdout.write(text)
    out = Path(args.output) if args.output else Path(args.embeddings).with_suffix(".metrics.csv")
    with open(out, "w", newline="") as fh:
        fh.write(text)
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    out = _outdir(cfg.output_dir)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values: {exc}", field="--values") from exc
    if not values:
        raise ConfigError("no sweep values given", field="--values")
    rows = sweep(cfg, args.axis, values)
    path = out / f"sweep_{args.axis}.csv"
    write_sweep(rows, path)
    for r in rows:
        print(f"{r[0]}={r[1]!r} {r[2]:<8} U={r[5]:.4f} T={r[6]:.4f} acc={r[7]:.4f}")
    print(f"-> {path}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="acl-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("config")
        s.add_argument("--seed", type=int)
        s.add_argument("--output-dir")
        s.set_defaults(fn=fn)
        return s

    with_config("gen-data", cmd_gen_data, "write dataset.csv / train.csv / test.csv")
    with_config("train", cmd_train, "train and write records, checkpoint, manifest")
    s = with_config("sweep", cmd_sweep, "ACL vs alpha=1 baseline over tau or alpha")
    s.add_argument("--axis", choices=("tau", "alpha"), default="tau")
    s.add_argument("--values", default="0.1,0.2,0.5,1.0")

    s = sub.add_parser("probe", help="linear probe on frozen checkpoint features")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--test-fraction", type=float, default=0.25)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=0.5)
    s.add_argument("--output-dir", default=".")
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("metrics", help="uniformity / tolerance of an embeddings CSV")
    s.add_argument("embeddings")
    s.add_argument("--t", type=float, default=2.0)
    s.add_argument("--normalization", choices=("all_pairs", "same_class"), default="all_pairs")
    s.add_argument("--output")
    s.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with thread_limit():
            return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"numeric failure at epoch {exc.epoch}, batch {exc.batch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError, ACLError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
