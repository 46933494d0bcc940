"""``vastopo`` command line: phantom | encode | edt | gradcheck | train | infer | eval | ablate.

Exit status is 0 on success, 1 on usage errors and 2 on data or validation
errors.  Diagnostics go to stderr.
"""
import argparse
import logging
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline
from .autograd import CheckpointError
from .edt import exact_edt
from .graph import save_graph_json
from .estimators import VesselTopologyEncoder
from .metrics import evaluate
from .validation import ValidationError
from .volume import PhantomSpec, Volume, load_rvol, make_phantom, save_rvol

log = logging.getLogger("vastopo")

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _int_triple(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected N or NX,NY,NZ with positive ints, got {text!r}")
    return tuple(parts)


def _float_pair(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {text!r}")
    return tuple(parts)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    common.add_argument("--threads", type=_positive_int, default=argparse.SUPPRESS,
                        help="cap on worker threads for numeric kernels")

    parser = _Parser(prog="vastopo", description="Vascular-topology guided segmentation toolkit.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic vessel phantom")
    p.add_argument("--dims", type=_int_triple, default=(32, 32, 32))
    p.add_argument("--branches", type=_positive_int, default=2)
    p.add_argument("--radius", type=_float_pair, default=(1.5, 2.5), help="tube radius MIN,MAX in voxels")
    p.add_argument("--classes", type=_positive_int, default=3)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("encode", parents=[common], help="vessel mask -> keypoint graph JSON")
    p.add_argument("--mask", required=True)
    p.add_argument("--n", type=_positive_int, default=256)
    p.add_argument("--k", type=_positive_int, default=8)
    p.add_argument("--d0", type=_positive_int, default=32)
    p.add_argument("--hidden", type=_positive_int, default=32)
    p.add_argument("--out", required=True)

    p = sub.add_parser("edt", parents=[common], help="distance transform of a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    p.add_argument("--scale", type=_positive_int, default=8)
    p.add_argument("--fusion", choices=("all",) + pipeline.FUSIONS, default="all")
    p.add_argument("--mode", choices=("all",) + pipeline.DENOMINATOR_MODES, default="all")
    p.add_argument("--seeds", type=_positive_int, default=1)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("train", parents=[common], help="train on a phantom")
    p.add_argument("--phantom-prefix", required=True)
    _model_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV loss log (iter,ce,scl,total)")

    p = sub.add_parser("infer", parents=[common], help="predict labels with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ct", required=True)
    p.add_argument("--vessel")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="score a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--json")

    p = sub.add_parser("ablate", parents=[common], help="all fusion x scl variants on one phantom")
    p.add_argument("--phantom-prefix", required=True)
    p.add_argument("--vessel", help="vessel mask to use instead of <prefix>.vessel.rvol")
    p.add_argument("--fusions", default=",".join(pipeline.FUSIONS))
    p.add_argument("--scls", default=",".join(pipeline.SCL_MODES))
    p.add_argument("--iters", type=_positive_int, default=200)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)
    return parser


def _model_flags(p):
    p.add_argument("--fusion", choices=pipeline.FUSIONS, default="cross_attention")
    p.add_argument("--scl", choices=pipeline.SCL_MODES, default="cats")
    p.add_argument("--iters", type=_positive_int, default=200)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-scl", type=float)
    p.add_argument("--denominator-mode", choices=pipeline.DENOMINATOR_MODES)


def _class_count(labels):
    return max(int(labels.array.max()) + 1, 2)


def cmd_phantom(args):
    spec = PhantomSpec(dims=args.dims, seed=args.seed, branch_count=args.branches,
                       tube_radius_range=args.radius, class_count=args.classes)
    ct, vessel, labels = make_phantom(spec)
    for suffix, vol in (("ct", ct), ("vessel", vessel), ("labels", labels)):
        save_rvol(vol, f"{args.out_prefix}.{suffix}.rvol")
    print(f"wrote {args.out_prefix}.{{ct,vessel,labels}}.rvol dims={spec.dims} vessel_voxels={int(vessel.array.sum())}")


def cmd_encode(args):
    mask = load_rvol(args.mask)
    enc = VesselTopologyEncoder(n_keypoints=args.n, k=args.k, node_dim=args.d0,
                                mlp_hidden=args.hidden, random_state=args.seed).fit()
    g = enc.encode(mask)
    save_graph_json(g, args.out)
    print(f"graph: n={g.n} k={g.k} edges={len(g.edges())} -> {args.out}")


def cmd_edt(args):
    mask = load_rvol(args.mask)
    d = exact_edt(mask)
    save_rvol(Volume(d.dist.astype(np.float32), mask.spacing), args.out)
    print(f"max distance {d.dist.max():.6g} -> {args.out}")


def cmd_gradcheck(args):
    fusions = pipeline.FUSIONS if args.fusion == "all" else (args.fusion,)
    modes = pipeline.DENOMINATOR_MODES if args.mode == "all" else (args.mode,)
    worst = 0.0
    for fusion in fusions:
        for mode in modes:
            for s in range(args.seeds):
                err = pipeline.gradcheck_pipeline(fusion, args.scale, seed=args.seed + s, denominator_mode=mode)
                worst = max(worst, err)
                status = "PASS" if err <= args.tol else "FAIL"
                print(f"{status} fusion={fusion} mode={mode} seed={args.seed + s} max_rel_err={err:.3e}")
    if worst > args.tol:
        log.error("gradient check failed: worst relative error %.3e > %.1e", worst, args.tol)
        return EXIT_DATA
    return 0


def cmd_train(args):
    prefix = args.phantom_prefix
    ct = load_rvol(f"{prefix}.ct.rvol")
    labels = load_rvol(f"{prefix}.labels.rvol")
    vessel = load_rvol(f"{prefix}.vessel.rvol")
    cfg = pipeline.with_overrides(
        pipeline.BackboneConfig(class_count=_class_count(labels)),
        fusion=args.fusion, scl=args.scl, iterations=args.iters, seed=args.seed,
        lr=args.lr, lambda_scl=args.lambda_scl, denominator_mode=args.denominator_mode,
    )
    model = pipeline.train(ct, labels, vessel, cfg)
    pipeline.save_model(model, args.out)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write(model.log_csv())
    first, last = model.history[0], model.history[-1]
    print(f"trained {cfg.iterations} iters: total loss {first[3]:.6g} -> {last[3]:.6g}; checkpoint {args.out}")


def cmd_infer(args):
    model = pipeline.load_model(args.ckpt)
    ct = load_rvol(args.ct)
    vessel = load_rvol(args.vessel) if args.vessel else None
    pred = pipeline.infer(model, ct, vessel)
    save_rvol(Volume(pred, ct.spacing), args.out)
    print(f"prediction -> {args.out}")


def cmd_eval(args):
    pred, gt = load_rvol(args.pred), load_rvol(args.gt)
    if pred.dims != gt.dims:
        raise ValidationError(f"dims mismatch: pred has dims {pred.dims}, gt has dims {gt.dims}")
    report = evaluate(pred, gt)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    print(f"DSC {report.macro_dsc:.4f}  mIoU {report.miou:.4f}  RVD {report.mean_rvd:.4f}")


def cmd_ablate(args):
    prefix = args.phantom_prefix
    ct = load_rvol(f"{prefix}.ct.rvol")
    labels = load_rvol(f"{prefix}.labels.rvol")
    fusions = tuple(f for f in args.fusions.split(",") if f)
    scls = tuple(s for s in args.scls.split(",") if s)
    for f in fusions:
        if f not in pipeline.FUSIONS:
            raise UsageError(f"vastopo ablate: unknown fusion {f!r}")
    for s in scls:
        if s not in pipeline.SCL_MODES:
            raise UsageError(f"vastopo ablate: unknown scl mode {s!r}")
    vessel_path = args.vessel or f"{prefix}.vessel.rvol"
    if any(f != "none" for f in fusions):
        vessel = load_rvol(vessel_path)
    else:
        vessel = None  # the topology branch is absent; the mask is never read
    cfg = pipeline.with_overrides(
        pipeline.BackboneConfig(class_count=_class_count(labels)),
        iterations=args.iters, seed=args.seed, lr=args.lr,
    )
    rows = pipeline.ablate(ct, labels, vessel, cfg, fusions, scls)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(pipeline.ablation_csv(rows))
    for row in rows:
        print("fusion={:<15} scl={:<4} dsc={:.4f} miou={:.4f} rvd={:.4f}".format(*row))


COMMANDS = {
    "phantom": cmd_phantom,
    "encode": cmd_encode,
    "edt": cmd_edt,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    args.seed = getattr(args, "seed", 0)
    threads = getattr(args, "threads", 1)
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args) or 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, CheckpointError, FloatingPointError) as exc:
        print(f"vastopo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
