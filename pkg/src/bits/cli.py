"""Command-line entry point: ``bits train|finetune|eval|analyze|verify|synth``.

Exit codes: 0 success, 1 verification failure, 2 configuration or usage
error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import codes as ec
from .autodiff import ShapeError
from .config import ConfigError, RunConfig, load_config
from .data import DatasetError, SyntheticFactorSpec, generate_synthetic, read_dataset, write_dataset
from .objective import DivergenceError
from .spectral import DegenerateSpectrumError, spectrum_summary, write_cv_csv

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
EVAL_TASKS = ("knn", "probe", "retrieval")
ANALYZE_WHAT = ("spectrum", "entropy", "bits", "mi")

log = logging.getLogger("bits")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _dataset(path):
    if path is None:
        raise DataError("no dataset path given")
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset not found: {p}")
    try:
        return read_dataset(p)
    except DatasetError as e:
        raise DataError(f"{p}: {e}") from None


def _checkpoint(path):
    from .trainer import CheckpointError, load_checkpoint

    if path is None:
        raise DataError("no checkpoint path given")
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p)
    except CheckpointError as e:
        raise DataError(str(e)) from None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_run(args) -> RunConfig:
    return load_config(args.config, _overrides(args.set))


# --- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import prepare_config, train

    rc = _load_run(args)
    ds = _dataset(rc.paths["dataset"])
    out = Path(rc.paths["out_dir"])
    if args.resume is None:
        prepare_config(rc.train, ds)
    rc.write_echo(out)
    res = train(rc.train, ds, out, resume=args.resume)
    print(json.dumps({"epochs": res.epoch, "steps": res.step, "final": res.metrics[-1] if res.metrics else None}))
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .trainer import finetune

    rc = _load_run(args)
    ckpt_path = args.checkpoint or rc.paths["checkpoint"]
    _checkpoint(ckpt_path)
    ds = _dataset(rc.paths["dataset"])
    out = Path(rc.paths["out_dir"])
    rc.write_echo(out)
    res = finetune(rc.train, ckpt_path, ds, out, reset_at_start=args.reset_at_start)
    print(json.dumps({"epochs": res.epoch, "steps": res.step, "final": res.metrics[-1] if res.metrics else None}))
    return EXIT_OK


def _split(ds, test_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(ds.n)
    n_test = max(1, int(round(ds.n * test_fraction)))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def cmd_eval(args) -> int:
    if args.task not in EVAL_TASKS:
        raise UsageError(f"unknown eval task {args.task!r}; expected one of {EVAL_TASKS}")
    ckpt = _checkpoint(args.checkpoint)
    ds = _dataset(args.dataset)
    if ds.labels is None:
        raise DataError(f"{args.dataset}: evaluation needs labels")
    report = {"task": args.task, "checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
              "branch": args.branch, "config": ckpt.config.to_dict()}
    if args.task == "retrieval":
        if args.metric == "hamming":
            codes = ec.extract(ckpt, ds, "codes", args.branch)
            m = args.bits or codes.bits
            if m != codes.bits:
                codes = ec.subsample_bits(codes, m, args.seed)
            value = ec.retrieval_map(codes, "hamming")
            report.update(metric="mAP", distance="hamming", bits=m, seed=args.seed)
        else:
            feats = ec.extract(ckpt, ds, "features", args.branch)
            value = ec.retrieval_map(feats, "cosine")
            report.update(metric="mAP", distance="cosine")
    else:
        if args.train_dataset:
            train_ds, test_ds = _dataset(args.train_dataset), ds
        else:
            train_ds, test_ds = _split(ds, args.test_fraction, args.seed)
        tr = ec.extract(ckpt, train_ds, "features", args.branch)
        te = ec.extract(ckpt, test_ds, "features", args.branch)
        if args.task == "knn":
            value = ec.knn_classify(tr, te, args.k, args.temp)
            report.update(metric="accuracy", k=args.k, temp=args.temp)
        else:
            value = ec.linear_probe(tr, te, args.epochs, args.lr)
            report.update(metric="accuracy", epochs=args.epochs, lr=args.lr)
    report["value"] = value
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "reports" / f"eval_{args.task}.json"
    _write_json(out, report)
    print(json.dumps({"task": args.task, "value": value, "report": str(out)}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.what not in ANALYZE_WHAT:
        raise UsageError(f"unknown analysis {args.what!r}; expected one of {ANALYZE_WHAT}")
    ckpt = _checkpoint(args.checkpoint)
    ds = _dataset(args.dataset)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if args.what == "spectrum":
        feats = ec.extract(ckpt, ds, "features", args.branch)
        try:
            s = spectrum_summary(feats.features)
        except DegenerateSpectrumError as e:
            raise DataError(str(e)) from None
        write_cv_csv(s, out_dir / "spectrum_cv.csv")
        _write_json(out_dir / "spectrum.json", {**s.as_dict(), "eigenvalues": s.eigenvalues.tolist()})
        written = ["spectrum_cv.csv", "spectrum.json"]
        summary = s.as_dict()
    else:
        codes = ec.extract(ckpt, ds, "codes", args.branch)
        ec.write_codes(codes, out_dir / "codes.bin")
        written.append("codes.bin")
        if args.what == "entropy":
            rep = ec.code_entropy(codes, args.block)
            _write_json(out_dir / "entropy.json", rep.as_dict())
            with open(out_dir / "entropy_marginal.csv", "w") as f:
                f.write("bit,entropy\n")
                f.writelines(f"{i},{v!r}\n" for i, v in enumerate(rep.marginal.tolist()))
            written += ["entropy.json", "entropy_marginal.csv"]
            summary = {"marginal_mean": rep.marginal_mean, "block_mean": rep.block_mean, "block_size": rep.block_size}
        elif args.what == "bits":
            if ds.labels is None:
                raise DataError(f"{args.dataset}: bit report needs labels")
            if not 0 <= args.bit < codes.bits:
                raise UsageError(f"--bit {args.bit} out of range for {codes.bits}-bit codes")
            rep = ec.bit_condition_report(codes, ds.labels, args.bit)
            _write_json(out_dir / f"bit{args.bit}_report.json", {"bit": args.bit, "classes": {str(k): v for k, v in rep.items()}})
            written.append(f"bit{args.bit}_report.json")
            summary = {"bit": args.bit, "classes": len(rep)}
        else:
            if ds.factors is None:
                raise DataError(f"{args.dataset}: dataset has no factor annotations")
            mi = ec.factor_bit_mutual_information(codes, ds.factors)
            names = list(ds.factor_names) if ds.factor_names else [f"factor{j}" for j in range(mi.shape[1])]
            with open(out_dir / "mi.csv", "w") as f:
                f.write("bit," + ",".join(names) + "\n")
                f.writelines(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n" for i, row in enumerate(mi))
            best = {n: {"bit": int(np.argmax(mi[:, j])), "mi": float(mi[:, j].max())} for j, n in enumerate(names)}
            _write_json(out_dir / "mi.json", {"factors": names, "max_per_factor": best})
            written += ["mi.csv", "mi.json"]
            summary = best
    print(json.dumps({"what": args.what, "written": [str(out_dir / w) for w in written], "summary": summary}))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import format_table, run_all

    results = run_all(args.instances, args.inject_fault)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_VERIFY
    print("all checks passed")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticFactorSpec(samples_per_combination=args.per_combination, image_size=args.size)
    ds = generate_synthetic(spec, seed=args.seed)
    write_dataset(ds, args.out)
    print(json.dumps({"samples": ds.n, "shape": list(ds.image_shape), "path": str(args.out)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bits", description="Binary self-distillation training and code analysis.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, fn in (("train", cmd_train), ("finetune", cmd_finetune)):
        s = sub.add_parser(name, help=f"{name} from a key = value config file")
        s.add_argument("config")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if name == "train":
            s.add_argument("--resume", help="checkpoint to continue an interrupted run from")
        else:
            s.add_argument("--checkpoint", help="checkpoint to fine-tune (else the config's checkpoint key)")
            s.add_argument("--reset-at-start", action="store_true", help="draw a fresh head before the first epoch")
        s.set_defaults(fn=fn)

    s = sub.add_parser("eval", help="kNN, linear probe or retrieval mAP")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("task")
    s.add_argument("--branch", default="teacher", choices=("teacher", "student"))
    s.add_argument("--metric", default="cosine", choices=("cosine", "hamming"))
    s.add_argument("--bits", type=int, help="subsample codes to this many bits (hamming only)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--temp", type=float, default=0.07)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--lr", type=float, default=0.5)
    s.add_argument("--train-dataset", help="separate training split; otherwise the dataset is split")
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--out", help="report path (default: <checkpoint dir>/reports/eval_<task>.json)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("analyze", help="spectrum, entropy, bit-conditioned report or factor MI")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("what")
    s.add_argument("--branch", default="teacher", choices=("teacher", "student"))
    s.add_argument("--block", type=int, default=8)
    s.add_argument("--bit", type=int, default=0)
    s.add_argument("--out", help="report directory (default: <checkpoint dir>/reports)")
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("verify", help="gradient checks and numerical oracles")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--inject-fault", choices=("logdet-sign",), help="test hook: break a component on purpose")
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("synth", help="write the synthetic factor dataset")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--per-combination", type=int, default=10)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"bits: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        print(f"bits: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as e:
        print(f"bits: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as e:
        print(f"bits: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
