"""Command-line front end: phantom | preprocess | train | predict | evaluate | gradcheck | report.

Exit status is 0 on success, 1 when a computation fails (for example a
non-finite loss) and 2 for usage or input errors. Every command writes a
JSON run manifest next to its main output.
"""
import argparse
import datetime
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, kvconfig
from ._accel import backend_name, set_num_threads

log = logging.getLogger("aaaseg")

EXIT_OK, EXIT_COMPUTE, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad flags, missing files or unreadable inputs (exit 2)."""


class ComputeError(Exception):
    """A pipeline stage failed on valid inputs (exit 1)."""


def _load_stage(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{stage}: {exc}") from exc


def _int_triple(text):
    v = tuple(int(p) for p in str(text).split(","))
    if len(v) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return v


def _int_tuple(text):
    return tuple(int(p) for p in str(text).split(",") if p.strip())


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def write_manifest(path, command, params, inputs, outputs):
    """Atomically write the run manifest for one command."""
    path = Path(path)
    doc = {
        "command": command,
        "parameters": {k: _jsonable(v) for k, v in sorted(params.items()) if k != "func"},
        "seed": params.get("seed"),
        "threads": params.get("threads"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "artifact_version": __version__,
        "backend": backend_name(),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, default=str) + "\n")
    os.replace(tmp, path)
    return path


def _manifest_for(output):
    output = Path(output)
    if output.suffix:
        return output.with_name(output.stem + ".manifest.json")
    return output / "run_manifest.json"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    from .phantom import generate_cohort, load_default_spec, load_spec, write_cohort

    if args.n < 1:
        raise InputError("phantom: --n must be >= 1")
    base = _load_stage("phantom spec", load_spec, args.spec) if args.spec else load_default_spec()
    try:
        cases = generate_cohort(args.n, base, seed=args.seed, prefix=args.prefix)
    except ValueError as exc:
        raise ComputeError(f"phantom generation: {exc}") from exc
    manifest = write_cohort(cases, args.out)
    log.info("wrote %d cases to %s", len(cases), args.out)
    inputs = [args.spec] if args.spec else []
    return _manifest_for(Path(args.out)), inputs, [manifest]


def cmd_preprocess(args):
    from .prep import RoiBounds, crop_roi, resample_nearest, resample_trilinear, window_level
    from .volio import read_metaimage, write_metaimage

    vol = _load_stage("read input", read_metaimage, args.input, as_mask=False)
    roi = _load_stage("roi", RoiBounds.parse, args.roi) if args.roi else None
    outputs = [Path(args.out)]
    try:
        if roi is not None:
            vol = crop_roi(vol, roi)
        vol = window_level(vol, args.window_center, args.window_width)
        if args.target_dims:
            vol = resample_trilinear(vol, args.target_dims)
    except ValueError as exc:
        raise InputError(f"preprocess: {exc}") from exc
    write_metaimage(vol, args.out)
    inputs = [args.input]
    if args.mask:
        mask = _load_stage("read mask", read_metaimage, args.mask, as_mask=True)
        if roi is not None:
            mask = _load_stage("roi", crop_roi, mask, roi)
        if args.target_dims:
            mask = resample_nearest(mask, args.target_dims)
        if not args.mask_out:
            raise InputError("preprocess: --mask requires --mask-out")
        write_metaimage(mask, args.mask_out)
        inputs.append(args.mask)
        outputs.append(Path(args.mask_out))
    return _manifest_for(args.out), inputs, outputs


def _net_config(args):
    from .hed3d import Hed3DConfig

    cfg = Hed3DConfig(
        widths=args.widths,
        side_stages=args.side_stages,
        input_dims=args.input_dims,
        deep_supervision=args.deep_supervision,
    )
    _load_stage("network config", cfg.validate)
    return cfg


def _train_config(args):
    from .hed3d import TrainConfig

    tc = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        plateau_factor=args.plateau_factor,
        plateau_patience=args.patience,
        min_lr=args.min_lr,
        validation_fraction=args.val_fraction,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
    )
    return _load_stage("training config", tc.validate)


def _prepare_scan(img, mask, cfg, args):
    from .prep import resample_nearest, resample_trilinear, window_level

    img = window_level(img, args.window_center, args.window_width)
    if img.dims != cfg.input_dims:
        img = resample_trilinear(img, cfg.input_dims)
        mask = resample_nearest(mask, cfg.input_dims)
    return img, mask


def cmd_train(args):
    from . import hed3d
    from .engine import NonFiniteError
    from .phantom import read_cohort
    from .prep import AugmentPlan, build_augmented_set
    from .volcore import mask_to_tensor, volume_to_tensor
    from .volio import save_checkpoint, write_history

    cohort = Path(args.cohort)
    if not cohort.is_dir():
        raise InputError(f"train: cohort directory not found: {cohort}")
    cfg = _net_config(args)
    tc = _train_config(args)
    cases = _load_stage("read cohort", read_cohort, cohort)
    if not cases:
        raise InputError(f"train: cohort {cohort} lists no cases")
    scans = [_load_stage(f"prepare {cid}", _prepare_scan, img, m, cfg, args) for cid, _, img, m in cases]

    order = np.random.default_rng([args.seed, 1]).permutation(len(scans))
    if len(scans) == 1:
        log.warning("single-case cohort: validating on the training case")
        train_idx, val_idx = list(order), list(order)
    else:
        n_val = min(len(scans) - 1, max(1, math.ceil(tc.validation_fraction * len(scans))))
        val_idx, train_idx = sorted(order[:n_val]), sorted(order[n_val:])

    def pair(v, m):
        return volume_to_tensor(v, 255.0)[0], mask_to_tensor(m)[0]

    train_set = []
    if args.crops > 0:
        plan = AugmentPlan(
            crops_per_scan=args.crops,
            transforms_per_crop=args.transforms,
            rotation_deg=args.rot_deg,
            translation_vox=args.trans_vox,
            seed=args.seed,
        )
        for i in train_idx:
            try:
                items = build_augmented_set(*scans[i], plan, scan_index=int(i))
            except ValueError as exc:
                raise ComputeError(f"augmentation of {cases[i][0]}: {exc}") from exc
            train_set.extend(pair(v, m) for v, m in items)
    else:
        train_set = [pair(*scans[i]) for i in train_idx]
    val_set = [pair(*scans[i]) for i in val_idx]
    log.info("training on %d items, validating on %d", len(train_set), len(val_set))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else out.with_name(out.stem + "_history.csv")
    net = hed3d.build(cfg, seed=args.seed)
    try:
        net, history = hed3d.train(net, train_set, val_set, tc, checkpoint_path=out)
    except NonFiniteError as exc:
        raise ComputeError(f"training: {exc}") from exc
    save_checkpoint(net, out)
    write_history(history, history_path)
    return _manifest_for(out), [cohort], [out, history_path]


def _predict_one(net, img, args):
    from . import hed3d
    from .postseg import segment
    from .prep import resample_trilinear, window_level
    from .volcore import Volume3D

    x = img if args.preprocessed else window_level(img, args.window_center, args.window_width)
    if x.dims != net.config.input_dims:
        prob = hed3d.predict(net, resample_trilinear(x, net.config.input_dims))
        back = resample_trilinear(prob, img.dims)
        prob = Volume3D(np.clip(back.data, 0.0, 1.0), img.spacing, img.origin)
    else:
        prob = hed3d.predict(net, x)
    try:
        mask, t = segment(prob)
    except ValueError as exc:
        raise ComputeError(f"postprocessing: {exc}") from exc
    log.info("Otsu threshold %.4f, %d voxels kept", t, int(mask.data.sum()))
    return prob, mask


def cmd_predict(args):
    from .volio import load_checkpoint, read_metaimage, write_metaimage

    net = _load_stage("load checkpoint", load_checkpoint, args.checkpoint)
    src = Path(args.input)
    out = Path(args.out)
    if src.is_dir():
        images = sorted(src.glob("*_image.mhd"))
        if not images:
            raise InputError(f"predict: no *_image.mhd files in {src}")
        out.mkdir(parents=True, exist_ok=True)
        outputs = []
        for p in images:
            cid = p.name[: -len("_image.mhd")]
            img = _load_stage(f"read {p.name}", read_metaimage, p, as_mask=False)
            prob, mask = _predict_one(net, img, args)
            write_metaimage(prob, out / f"{cid}_prob.mhd")
            write_metaimage(mask, out / f"{cid}_mask.mhd")
            outputs += [out / f"{cid}_prob.mhd", out / f"{cid}_mask.mhd"]
        return _manifest_for(out), [args.checkpoint, src], outputs
    img = _load_stage("read input", read_metaimage, src, as_mask=False)
    prob, mask = _predict_one(net, img, args)
    prob_out = Path(args.prob_out) if args.prob_out else out.with_name(out.stem + "_prob" + out.suffix)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metaimage(mask, out)
    write_metaimage(prob, prob_out)
    return _manifest_for(out), [args.checkpoint, src], [out, prob_out]


def _stages(gt_dir):
    import csv

    manifest = Path(gt_dir) / "manifest.csv"
    if not manifest.is_file():
        return {}
    with open(manifest, newline="") as fh:
        return {r["case_id"]: r["stage"] for r in csv.DictReader(fh)}


def cmd_evaluate(args):
    from .metrics import evaluate_case
    from .volio import read_metaimage, write_report

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise InputError(f"evaluate: directory not found: {d}")
    stages = _stages(gt_dir)
    preds = sorted(pred_dir.glob("*_mask.mhd"))
    if not preds:
        raise InputError(f"evaluate: no *_mask.mhd files in {pred_dir}")
    rows = []
    for p in preds:
        cid = p.name[: -len("_mask.mhd")]
        g = gt_dir / p.name
        if not g.is_file():
            raise InputError(f"evaluate: no ground truth for case {cid} ({g})")
        pm = _load_stage(f"read {p}", read_metaimage, p, as_mask=True)
        gm = _load_stage(f"read {g}", read_metaimage, g, as_mask=True)
        rows.append(_load_stage(f"evaluate {cid}", evaluate_case, pm, gm, cid, stages.get(cid, "")))
    write_report(rows, args.out)
    mean_dice = float(np.mean([r.dice for r in rows]))
    print(f"cases {len(rows)}  mean dice {mean_dice:.4f}")
    return _manifest_for(args.out), [pred_dir, gt_dir], [args.out]


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    tol = {"float64": args.tol64, "float32": args.tol32}
    results = run_suite(seeds=args.seeds, base_seed=args.seed)
    lines = ["op,mode,max_rel_err,tolerance,status"]
    failed = []
    print(f"{'op':<22}{'mode':<9}{'max rel err':>13}  status")
    for (op, mode), err in results.items():
        ok = err < tol[mode]
        if not ok:
            failed.append(f"{op}/{mode}")
        print(f"{op:<22}{mode:<9}{err:>13.3e}  {'PASS' if ok else 'FAIL'}")
        lines.append(f"{op},{mode},{err!r},{tol[mode]!r},{'pass' if ok else 'fail'}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    if failed:
        raise ComputeError(f"gradcheck: over tolerance: {', '.join(failed)}")
    return _manifest_for(out), [], [out]


def cmd_report(args):
    from .metrics import mann_whitney_u
    from .volio import read_report

    rows, summary = _load_stage("read report", read_report, args.input)
    lines = [f"report {args.input}: {len(rows)} cases"]
    for col, val in (summary or {}).items():
        if val is not None:
            lines.append(f"  {col:<22} {val[0]:.4f} ± {val[1]:.4f}")
    inputs = [args.input]
    if args.compare:
        other, _ = _load_stage("read comparison report", read_report, args.compare)
        a = [r[args.metric] for r in rows if r[args.metric] != ""]
        b = [r[args.metric] for r in other if r[args.metric] != ""]
        if not a or not b:
            raise InputError(f"report: metric {args.metric!r} has no values in one of the reports")
        res = mann_whitney_u(a, b)
        lines.append(
            f"  Mann-Whitney ({args.metric}, {args.input} > {args.compare}): "
            f"U={res.u_a:g} p={res.p:.4g} ({res.method})"
        )
        inputs.append(args.compare)
    text = "\n".join(lines) + "\n"
    print(text, end="")
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".summary.txt")
    out.write_text(text)
    return _manifest_for(out), inputs, [out]


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0, help="random seed")
    parser.add_argument("--threads", type=int, default=default, help="compute threads (numba + BLAS)")
    parser.add_argument("--config", default=default, help="key = value file; command-line flags win")
    parser.add_argument("--manifest", default=default, help="run manifest path (default: next to the output)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _window_flags(p):
    p.add_argument("--window-center", type=float, default=150.0)
    p.add_argument("--window-width", type=float, default=500.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="aaaseg", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "generate a synthetic phantom cohort")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--spec", help="phantom spec file (default: built-in phantom_v1)")
    p.add_argument("--out", required=True, help="cohort directory")
    p.add_argument("--prefix", default="case")

    p = add("preprocess", cmd_preprocess, "crop, window and resample one volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--roi", help="x0,y0,z0,x1,y1,z1 inclusive voxel bounds")
    _window_flags(p)
    p.add_argument("--target-dims", type=_int_triple, help="nx,ny,nz")
    p.add_argument("--mask", help="ground-truth mask to carry through crop/resample")
    p.add_argument("--mask-out")

    p = add("train", cmd_train, "train the network on a cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV (default: <out>_history.csv)")
    p.add_argument("--widths", type=_int_tuple, default=(4, 8, 16, 32, 32))
    p.add_argument("--side-stages", type=_int_tuple, default=(3, 4, 5))
    p.add_argument("--input-dims", type=_int_triple, default=(64, 64, 32))
    p.add_argument("--deep-supervision", type=_bool, default=False)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--plateau-factor", type=float, default=0.2)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--min-lr", type=float, default=1e-6)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--crops", type=int, default=0, help="random crops per scan (0 = no augmentation)")
    p.add_argument("--transforms", type=int, default=35)
    p.add_argument("--rot-deg", type=float, default=10.0)
    p.add_argument("--trans-vox", type=float, default=10.0)
    _window_flags(p)

    p = add("predict", cmd_predict, "probability map + post-processed mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, help="volume file or cohort directory")
    p.add_argument("--out", required=True, help="mask file, or directory for cohort input")
    p.add_argument("--prob-out")
    p.add_argument("--preprocessed", type=_bool, default=False, help="input is already windowed to [0, 255]")
    _window_flags(p)

    p = add("evaluate", cmd_evaluate, "per-case metrics and summary CSV")
    p.add_argument("--pred", required=True, help="directory of <case>_mask.mhd predictions")
    p.add_argument("--gt", required=True, help="directory of <case>_mask.mhd ground truth")
    p.add_argument("--out", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every engine op")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol64", type=float, default=1e-5)
    p.add_argument("--tol32", type=float, default=1e-3)
    p.add_argument("--out", default="gradcheck.csv")

    p = add("report", cmd_report, "summarise a metrics CSV, optionally compare two")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--compare", help="second report for a one-sided Mann-Whitney test")
    p.add_argument("--metric", default="dice")
    p.add_argument("--out")
    return parser


def _apply_config(parser, argv):
    """Re-parse with config-file values installed as defaults, so explicit flags still win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = kvconfig.load(args.config)
    except (OSError, ValueError) as exc:
        raise InputError(f"config: {exc}") from exc
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("func", "help", "config"):
            raise InputError(f"config: unknown key {key!r} for command {args.command}")
        action = known[dest]
        if action.type is not None and not isinstance(value, bool):
            text = ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
            try:
                value = action.type(text)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise InputError(f"config: bad value for {key!r}: {exc}") from exc
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    except InputError as exc:
        print(f"aaaseg: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.threads is not None:
            set_num_threads(args.threads)
        manifest, inputs, outputs = args.func(args)
        params = {f: v for f, v in vars(args).items() if f not in ("func",)}
        write_manifest(args.manifest or manifest, args.command, params, inputs, outputs)
    except InputError as exc:
        print(f"aaaseg: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ComputeError as exc:
        print(f"aaaseg: failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"aaaseg: failed: {args.command}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except ValueError as exc:
        print(f"aaaseg: error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
