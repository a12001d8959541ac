"""``oct-layertrace`` command line: synth, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 check or metric failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as dataio
from .exceptions import ConfigError, InputTooWideError, LayerTraceError, SplitError
from .runtime import thread_limit

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
IMAGE_SUFFIXES = {".png", ".pgm", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg"}

log = logging.getLogger("oct_layertrace")


class UsageError(Exception):
    pass


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _load_json(path, kind):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {kind} {path}: {exc}") from exc


# -- synth --------------------------------------------------------------------------------

def cmd_synth(args):
    spec = dataio.PhantomSpec.from_dict(_load_json(args.spec, "phantom spec")) if args.spec else dataio.PhantomSpec()
    pspec = None
    if args.pathological:
        pspec = (dataio.PhantomSpec.from_dict(_load_json(args.pathological_spec, "phantom spec"))
                 if args.pathological_spec else None)
    volumes = dataio.generate_dataset(spec, args.volumes, args.seed, pspec, args.pathological)
    dataio.write_dataset(volumes, args.out, extra={"seed": args.seed, "spec": spec.to_dict()})
    print(f"wrote {len(volumes)} volumes to {args.out}")
    return EXIT_OK


# -- train --------------------------------------------------------------------------------

def _match_boundaries(volumes, n_boundaries):
    out = []
    for v in volumes:
        if v.boundaries.shape[1] == n_boundaries:
            out.append(v)
        elif n_boundaries == len(dataio.MIXED_BOUNDARIES) and set(dataio.MIXED_BOUNDARIES) <= set(v.boundary_names):
            out.append(v.with_boundaries(dataio.MIXED_BOUNDARIES))
        else:
            raise ConfigError(
                f"volume {v.name} has {v.boundaries.shape[1]} boundaries; the model config expects {n_boundaries}"
            )
    return out


def cmd_train(args):
    from .model import LayerTraceNet, ModelConfig
    from .training import TrainConfig, evaluate_prepared, prepare_volume, train

    tcfg = TrainConfig.from_dict(_load_json(args.config, "training config"))
    mcfg = ModelConfig.from_dict(_load_json(args.model_config, "model config"))
    volumes = _match_boundaries(dataio.read_dataset(args.data), mcfg.n_boundaries)
    train_v, test_v = dataio.split_dataset(volumes, seed=tcfg.seed, min_per_stratum=args.min_per_stratum)
    n_path = sum(v.pathological for v in train_v)
    print(f"train: {len(train_v) - n_path} normal + {n_path} pathological; test: {len(test_v)} volumes", flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(json.dumps(
        {"train": [v.name for v in train_v], "test": [v.name for v in test_v]}, indent=2) + "\n")

    def report(record):
        line = f"epoch {record['epoch']}: loss {record['loss']:.6f}"
        if "eval_mae_overall" in record:
            line += f" eval MAE {record['eval_mae_overall']:.3f}"
        print(line, flush=True)

    model = LayerTraceNet(mcfg)
    result = train(model, train_v, tcfg, out_dir=out, val_volumes=test_v, resume=args.resume, callback=report)
    per_scan = evaluate_prepared(result.model, [prepare_volume(v, mcfg.height, mcfg.width) for v in test_v])
    means = np.nanmean(per_scan, axis=0)
    names = list(test_v[0].boundary_names) + ["Overall"]
    print("test MAE " + " ".join(f"{n}={m:.3f}" for n, m in zip(names, [*means, means.mean()])), flush=True)
    return EXIT_OK


# -- infer --------------------------------------------------------------------------------

def _gather_inputs(path: Path):
    """Return [(relative output stem, raw image)] for an image, volume or dataset."""
    if path.is_file():
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            raise UsageError(f"{path}: unsupported image type")
        return [(path.stem, dataio.read_image(path))]
    if not path.is_dir():
        raise UsageError(f"{path}: no such file or directory")
    manifest = path / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        if "volumes" in meta:
            items = []
            for name in meta["volumes"]:
                items += [(f"{name}/{stem}", img) for stem, img in _gather_inputs(path / name)]
            return items
        return [(Path(s["image"]).stem, dataio.read_image(path / s["image"])) for s in meta["slices"]]
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"{path}: no images found")
    return [(p.stem, dataio.read_image(p)) for p in files]


def cmd_infer(args):
    from .estimator import infer_scans
    from .metrics import render_overlay
    from .model import load_model

    model_dir = Path(args.model)
    if not (model_dir / "model.json").exists():
        raise UsageError(f"{model_dir}: not a model checkpoint")
    items = _gather_inputs(Path(args.input))
    model = load_model(model_dir)
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        results = infer_scans(model, [img for _, img in items], side_outputs=args.side_outputs)
    except InputTooWideError as exc:
        raise UsageError(str(exc)) from exc
    elapsed = time.perf_counter() - t0
    for (stem, img), res in zip(items, results):
        target = out / f"{stem}.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        coords = res.standardized if args.standardized else res.boundaries
        dataio.write_boundaries_csv(target, coords)
        if args.overlay:
            render_overlay(img if not args.standardized else res.record.image, coords,
                           path=out / f"{stem}_overlay.png")
        if args.side_outputs:
            for r, channel in enumerate(res.loi):
                dataio.write_image(out / f"{stem}_loi{r}.png", np.rint(channel * 255))
            dataio.write_image(out / f"{stem}_edge.png", np.rint(res.edge * 255))
    print(f"inferred {len(items)} scan(s) in {elapsed:.2f} s ({elapsed / max(len(items), 1):.2f} s per scan)",
          file=sys.stderr)
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------------

def _csv_inventory(root: Path):
    if not root.is_dir():
        raise UsageError(f"{root}: not a directory")
    return {p.relative_to(root).as_posix(): p for p in sorted(root.rglob("*.csv"))}


def _stack(paths):
    arrays = [dataio.read_boundaries_csv(p) for p in paths]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise UsageError(f"boundary files have differing shapes: {sorted(shapes)}")
    return np.stack(arrays)


def cmd_eval(args):
    from .metrics import evaluate, write_report_csv, write_report_json

    pred_inv = _csv_inventory(Path(args.pred))
    gt_inv = _csv_inventory(Path(args.gt))
    inventories = [gt_inv]
    if args.gt2:
        inventories.append(_csv_inventory(Path(args.gt2)))
    keys = sorted(gt_inv)
    missing = sorted(set(keys) - set(pred_inv))
    for inv in inventories[1:]:
        missing += sorted(set(keys) ^ set(inv))
    if missing or not keys:
        raise UsageError("scan inventories differ; missing: " + (", ".join(missing) or "(no GT scans)"))
    gt = _stack([gt_inv[k] for k in keys])
    pred = _stack([pred_inv[k] for k in keys])
    if pred.shape != gt.shape:
        raise UsageError(f"prediction shape {pred.shape[1:]} differs from GT {gt.shape[1:]}")
    columns = {}
    if args.gt2:
        gt2 = _stack([inventories[1][k] for k in keys])
        columns["inter-marker"] = evaluate(gt2, gt, dataset=args.dataset)
    columns["ours"] = evaluate(pred, gt, dataset=args.dataset, sort=args.sort)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, columns)
    write_report_json(out.with_suffix(".json"), columns)
    print(f"overall MAE {columns['ours'].overall_mean:.4f} +- {columns['ours'].overall_std:.4f} "
          f"over {columns['ours'].n_scans} scans; report written to {out}")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------------------

def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    results = run_gradcheck(args.module, tol=args.tol)
    for r in results:
        print(f"{r.name:10s} max relative error {r.max_rel_error:.3e} {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# -- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, help="cap worker threads (env OCT_LAYERTRACE_THREADS)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible execution")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="oct-layertrace", description="Retinal layer boundary tracing for OCT.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a phantom dataset")
    p.add_argument("--spec", help="phantom spec JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--volumes", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pathological", type=int, default=0, help="extra drusen volumes")
    p.add_argument("--pathological-spec")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="split, train and checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--min-per-stratum", type=_positive_int, default=5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="trace boundaries with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--side-outputs", action="store_true")
    p.add_argument("--standardized", action="store_true", help="emit standardized-space coordinates")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="MAE report against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--gt2")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default="")
    p.add_argument("--sort", action="store_true", help="sort each predicted column before scoring")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--module", choices=("all", "conv", "lstm", "losses"), default="all")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with thread_limit(args.threads, args.deterministic):
            return args.func(args)
    except (UsageError, ConfigError, SplitError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LayerTraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
