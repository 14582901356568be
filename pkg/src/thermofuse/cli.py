"""``thermofuse`` command-line entry point.

Every command prints its effective configuration as one JSON line prefixed
with ``config:`` before doing any work. Failures print one JSON line
``{"error": <type>, "message": <text>}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from thermofuse import fileio

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_config(command: str, config: dict) -> None:
    print("config: " + json.dumps({"command": command, **config}, sort_keys=True), flush=True)


def _emit_result(payload: dict) -> None:
    print("result: " + json.dumps(payload, sort_keys=True), flush=True)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# -- commands -------------------------------------------------------------------------

def cmd_simulate(args) -> dict:
    from thermofuse.dataset import DatasetIndex, Entry, split_dataset
    from thermofuse.simulate import GeneratorConfig, generate_dataset

    raw = _read_json(args.spec) if args.spec else {}
    split = raw.pop("split", None)
    if args.split:
        split = [int(v) for v in _floats(args.split)]
    cfg = GeneratorConfig.from_dict(raw)
    _emit_config("simulate", {"generator": asdict(cfg), "count": args.count, "seed": args.seed,
                              "split": split, "out": str(args.out)})
    out = Path(args.out)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    (out / "ground_truth").mkdir(parents=True, exist_ok=True)
    entries = []
    for seq, gt in generate_dataset(cfg, args.count, args.seed):
        fileio.save_sequence(seq, out / "sequences" / f"{seq.id}.ptseq")
        fileio.save_ground_truth(gt, out / "ground_truth" / seq.id)
        entries.append(Entry(f"sequences/{seq.id}.ptseq", f"ground_truth/{seq.id}"))
    index = split_dataset(DatasetIndex(entries), split, args.seed)
    index.save(out)
    return {"sequences": len(entries), "index": str(out / "index.json")}


def cmd_preprocess(args) -> dict:
    from thermofuse.augmentation import AugmentationConfig, Provenance, replay, write_samples
    from thermofuse.dataset import DatasetIndex

    _emit_config("preprocess", {"in": str(args.inp), "out": str(args.out), "pca_j": args.pca_j,
                                "tsr_degree": args.tsr_degree, "seed": args.seed})
    index = DatasetIndex.load(args.inp)
    cfg = AugmentationConfig(pca_components=args.pca_j, tsr_degree=args.tsr_degree, factor=1, seed=args.seed)

    def samples():
        for e in index.entries:
            seq_p, gt_p = index.resolve(args.inp, e)
            seq = fileio.load_sequence(seq_p)
            yield replay(seq, fileio.load_ground_truth(gt_p), Provenance(seq.id), cfg, e.split or "test")

    manifest = write_samples(samples(), args.out, cfg)
    return {"samples": len(manifest["samples"]), "out": str(args.out)}


def cmd_augment(args) -> dict:
    from thermofuse.augmentation import AugmentationConfig, augment_dataset, write_samples
    from thermofuse.dataset import DatasetIndex

    raw = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = AugmentationConfig.from_dict(raw)
    _emit_config("augment", {"augmentation": asdict(cfg), "in": str(args.inp), "out": str(args.out)})
    index = DatasetIndex.load(args.inp)
    manifest = write_samples(augment_dataset(index, cfg, args.inp), args.out, cfg)
    return {"samples": len(manifest["samples"]), "out": str(args.out)}


def _run_config(args):
    from thermofuse.training import RunConfig

    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    for key in ("data_dir", "out_dir"):
        if getattr(args, key, None):
            raw[key] = getattr(args, key)
    cfg = RunConfig.from_dict(raw)
    if not Path(cfg.data_dir).is_dir():
        raise FileNotFoundError(f"data_dir does not exist: {cfg.data_dir}")
    return cfg


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_train(args) -> dict:
    from thermofuse.report import write_run
    from thermofuse.training import load_samples, train

    cfg = _run_config(args)
    _emit_config("train", cfg.to_dict())
    samples = load_samples(cfg)
    result = train(cfg, samples, log=_log)
    eval_samples = [s for s in samples if s.split == cfg.eval_split]
    write_run(cfg.out_dir, result.report, result.predictions, eval_samples)
    return {"checkpoint": str(result.checkpoint), "metrics": result.report.metrics}


def cmd_eval(args) -> dict:
    from thermofuse.report import write_run
    from thermofuse.training import RunConfig, evaluate, load_model, load_samples

    _, _, extra = load_model(args.checkpoint)
    run = RunConfig.from_dict({**extra.get("run", {}), "data_dir": args.data_dir or extra.get("data_dir", "")})
    _emit_config("eval", {"checkpoint": str(args.checkpoint), "split": args.split, "out": str(args.out),
                          "data_dir": run.data_dir, "head": args.head, "seed": args.seed})
    if not Path(run.data_dir).is_dir():
        raise FileNotFoundError(f"data_dir does not exist: {run.data_dir!r}; pass --data-dir")
    samples = load_samples(run)
    report, preds = evaluate(args.checkpoint, samples, args.split, args.head, run.batch_size)
    write_run(args.out, report, preds, [s for s in samples if s.split == args.split])
    return {"metrics": report.metrics, "out": str(args.out)}


def cmd_sweep(args) -> dict:
    from thermofuse.training import load_samples, sweep_lambda

    cfg = _run_config(args)
    if args.grid:
        cfg.lambda_grid = _floats(args.grid)
    _emit_config("sweep-lambda", cfg.to_dict())
    reports = sweep_lambda(cfg, cfg.lambda_grid, load_samples(cfg), log=_log)
    return {"csv": str(Path(cfg.out_dir) / "lambda_sweep.csv"),
            "rows": [{"lambda": lam, **r.metrics} for lam, r in zip(cfg.lambda_grid, reports)]}


def cmd_report(args) -> dict:
    from thermofuse.report import build_report

    _emit_config("report", {"in": str(args.inp), "out": str(args.out), "seed": args.seed})
    payload = build_report(args.inp, args.out)
    return {"runs": sorted(payload), "out": str(args.out)}


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thermofuse", description="Pulse-thermography PCA/TSR fusion toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate synthetic sequences and ground truth")
    s.add_argument("--spec", help="generator config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", help="train,val,test counts (default: proportional 26/6/6)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="compress sequences to PCA/TSR tensors without augmentation")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pca-j", type=int, default=10)
    s.add_argument("--tsr-degree", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("augment", help="spatiotemporal augmentation of a split dataset")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="augmentation config JSON")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_augment)

    for name, func, help_ in (("train", cmd_train, "train a model"),
                              ("sweep-lambda", cmd_sweep, "train one model per loss weight")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="run config JSON")
        s.add_argument("--seed", type=int)
        s.add_argument("--data-dir", dest="data_dir")
        s.add_argument("--out-dir", dest="out_dir")
        if name == "sweep-lambda":
            s.add_argument("--grid", help="comma-separated lambda values")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="score a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.add_argument("--data-dir", dest="data_dir")
    s.add_argument("--head", choices=("multiclass", "binary_depth"))
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="combine run directories into tables and figures")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_report)
    return p


def thread_cap() -> int | None:
    from thermofuse.augmentation import default_workers
    import os
    return default_workers() if "THERMOFUSE_THREADS" in os.environ else None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cap = thread_cap()
        if cap is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=cap):
                result = args.func(args)
        else:
            result = args.func(args)
    except UsageError as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_USAGE
    except Exception as exc:  # reported as one line, never a traceback
        _error(type(exc).__name__, str(exc))
        return EXIT_FAILURE
    _emit_result(result)
    return 0


def _error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": " ".join(message.split())}), file=sys.stderr, flush=True)


if __name__ == "__main__":
    sys.exit(main())
