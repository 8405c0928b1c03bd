"""Command-line entry point: ``thermoreg <command> [options]``.

Exit codes: 0 success, 1 user error (bad flags, missing files, invalid
config or inputs), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .grid import GridError, preprocess, read_landmarks, read_nifti, read_volume, write_volume
from .inpaint import mask_at, train_inpaint
from .metrics import evaluate
from .neural import NetworkParams, TrainingAborted
from .phantom import PhantomSpec, gen_case, load_case, save_case
from .pipeline import (PipelineConfig, RunManifest, StageError, make_inpct, run_full, run_intra_procedural,
                       run_pre_procedural)
from .register import train_urnet
from .synthesis import train_synthesis, volume_slices
from .xform import read_field

log = logging.getLogger("thermoreg")

USER_ERRORS = (ValueError, FileNotFoundError, NotADirectoryError, GridError, KeyError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> Parser:
    parser = Parser(prog="thermoreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    ph = sub.add_parser("phantom", help="synthetic cases").add_subparsers(dest="action", required=True,
                                                                          parser_class=Parser)
    gen = ph.add_parser("gen", help="generate phantom case directories")
    _common(gen)
    gen.add_argument("--count", type=int, default=1, help="consecutive seeds; >1 writes case_<seed> subdirs")

    pre = sub.add_parser("preprocess", help="clamp, normalize and resample a volume")
    _common(pre)
    pre.add_argument("--in", dest="inp", required=True)
    pre.add_argument("--clamp", type=float, nargs=2, metavar=("LO", "HI"))
    pre.add_argument("--shape", type=int, nargs=3)
    pre.add_argument("--spacing", type=float, nargs=3)

    tr = sub.add_parser("train", help="train a network").add_subparsers(dest="action", required=True,
                                                                        parser_class=Parser)
    for name in ("synth", "inpaint", "reg"):
        p = tr.add_parser(name)
        _common(p)
        p.add_argument("--steps", type=int, help="override the configured step count")
        if name == "reg":
            p.add_argument("--inpaint-checkpoint", help="inpainting net used to build inpCT training images")

    run = sub.add_parser("run", help="run pipeline stages on a case").add_subparsers(dest="action", required=True,
                                                                                     parser_class=Parser)
    for name in ("pre", "intra", "full"):
        p = run.add_parser(name)
        _common(p)
        p.add_argument("--case", help="case directory (overrides config)")

    ev = sub.add_parser("eval", help="metrics for a prediction against ground truth")
    _common(ev)
    ev.add_argument("--pred", help="predicted volume (NIfTI)")
    ev.add_argument("--truth", help="reference volume (NIfTI)")
    ev.add_argument("--labels", nargs="+", metavar="NII",
                    help="one file: region for PSNR; two files: predicted and reference label maps (Dice per label)")
    ev.add_argument("--field", help="displacement field for TRE")
    ev.add_argument("--fixed-landmarks")
    ev.add_argument("--moving-landmarks")

    rep = sub.add_parser("report", help="summarize run manifests")
    _common(rep)
    rep.add_argument("runs", nargs="+", help="run directories or manifest.json files")
    return parser


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True) if args.json else text)


# --------------------------------------------------------------------------
# commands


def cmd_phantom_gen(args) -> int:
    cfg = _config(args)
    if not args.out:
        raise ValueError("--out is required")
    overrides = {}
    if cfg.grid_shape is not None:
        overrides["shape"] = tuple(cfg.grid_shape)
    if cfg.grid_spacing is not None:
        overrides["spacing"] = tuple(cfg.grid_spacing)
    if args.count < 1:
        raise ValueError("--count must be at least 1")
    written = []
    for seed in range(cfg.seed, cfg.seed + args.count):
        case = gen_case(PhantomSpec.random(seed, **overrides))
        d = Path(args.out) if args.count == 1 else Path(args.out) / f"case_{seed:03d}"
        written.append(str(save_case(case, d)))
    _emit(args, {"cases": written}, "\n".join(written))
    return 0


def cmd_preprocess(args) -> int:
    if not args.out:
        raise ValueError("--out is required")
    v = read_volume(args.inp)
    out = preprocess(v, clamp=tuple(args.clamp) if args.clamp else None, shape=args.shape, spacing=args.spacing)
    write_volume(out, args.out)
    _emit(args, {"out": args.out, "shape": list(out.shape), "spacing": list(out.spacing)}, args.out)
    return 0


def _train_cases(cfg: PipelineConfig):
    if not cfg.train_cases:
        raise ValueError("config lists no train_cases")
    return [load_case(d) for d in cfg.train_cases]


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = _train_cases(cfg)
    if args.action == "synth":
        s = cfg.synth
        state = train_synthesis(volume_slices([c.pmr for c in cases]), volume_slices([c.pct for c in cases]),
                                s.weights, args.steps if args.steps is not None else s.steps, cfg.seed,
                                s.batch_size, s.lr, s.base, s.n_res)
        for name, p in state.params().items():
            p.save(out / f"{name}.ckpt")
        log_rows = [r.__dict__ for r in state.history]
        files = {"G": str(out / "G.ckpt")}
    elif args.action == "inpaint":
        s = cfg.inpaint
        shape = cases[0].grid.shape
        masks = lambda i: mask_at(shape, cfg.seed, i % s.n_augment, cases[0].grid.spacing)
        p = train_inpaint([c.pct for c in cases], masks, args.steps if args.steps is not None else s.steps,
                          cfg.seed, s.conv_kind, s.channels, s.lr, s.hole_weight)
        p.save(out / "inpaint.ckpt")
        log_rows, files = p.meta["loss_history"], {"inpaint": str(out / "inpaint.ckpt")}
    else:
        s = cfg.reg
        if s.train_fixed == "inpct":
            ckpt = args.inpaint_checkpoint or cfg.inpaint.checkpoint
            inp = NetworkParams.load(ckpt) if ckpt and cfg.inpaint.mode == "net" else None
            if inp is None and cfg.inpaint.mode == "net":
                raise ValueError("reg.train_fixed = inpct needs an inpainting checkpoint")
            fixed = [make_inpct(c, cfg, inp) for c in cases]
        else:
            fixed = [getattr(c, s.train_fixed) for c in cases]
        state = train_urnet([(c.pct, f) for c, f in zip(cases, fixed)], s.lam,
                            args.steps if args.steps is not None else s.steps, cfg.seed, s.lr, s.window,
                            s.channels, s.pool)
        state.params().save(out / "urnet.ckpt")
        log_rows, files = [list(h) for h in state.history[::50]], {"urnet": str(out / "urnet.ckpt")}
    (out / f"train_{args.action}.json").write_text(json.dumps({"config": cfg.to_dict(), "log": log_rows}, indent=2))
    _emit(args, {"checkpoints": files}, "\n".join(files.values()))
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.case:
        cfg.case_dir = args.case
    if args.out:
        cfg.out_dir = args.out
    if args.action == "full":
        m = run_full(None, cfg)
        _emit(args, json.loads(m.to_json()), f"status {m.status}  manifest {Path(cfg.out_dir) / 'manifest.json'}")
        if m.status != "ok":
            causes = [s for s in m.stages if s.status == "failed"]
            msg = causes[0].error if causes else (m.error or "")
            return 1 if msg.split(":")[0] in {e.__name__ for e in USER_ERRORS} | {"NiftiParseError",
                                                                                    "NiftiIntegrityError"} else 2
        return 0
    if not cfg.case_dir:
        raise ValueError("no case directory (use --case or case_dir in the config)")
    case = load_case(cfg.case_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.action == "pre":
            phi, vol = run_pre_procedural(case, cfg, out_dir=out)
            files = {"phi1": str(out / "phi1.nii"), "sct": str(out / "sct.nii")}
        else:
            phi, vol = run_intra_procedural(case, cfg, out_dir=out)
            files = {"phi2": str(out / "phi2.nii"), "inpct": str(out / "inpct.nii")}
    except StageError as e:
        raise e.cause from e
    _emit(args, files, "\n".join(files.values()))
    return 0


def cmd_eval(args) -> int:
    kw = {}
    if args.pred or args.truth:
        if not (args.pred and args.truth):
            raise ValueError("--pred and --truth go together")
        kw["pred"], kw["truth"] = read_volume(args.pred), read_volume(args.truth)
    if args.labels:
        if len(args.labels) == 1:
            region, _, _ = read_nifti(args.labels[0])
            kw["region"] = np.asarray(region) > 0
        elif len(args.labels) == 2:
            a, _, _ = read_nifti(args.labels[0])
            b, _, _ = read_nifti(args.labels[1])
            values = sorted(set(np.unique(a).tolist()) | set(np.unique(b).tolist()) - {0})
            kw["labels"] = {f"label_{int(v)}": (a == v, b == v) for v in values}
        else:
            raise ValueError("--labels takes one region file or a predicted/reference pair")
    if args.field or args.fixed_landmarks or args.moving_landmarks:
        if not (args.field and args.fixed_landmarks and args.moving_landmarks):
            raise ValueError("TRE needs --field, --fixed-landmarks and --moving-landmarks")
        kw.update(field_=read_field(args.field), fixed_pts=read_landmarks(args.fixed_landmarks),
                  moving_pts=read_landmarks(args.moving_landmarks))
    if not kw:
        raise ValueError("nothing to evaluate")
    rep = evaluate(**kw)
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text if args.json else _summary(json.loads(text)))
    return 0


def _summary(d: dict) -> str:
    rows = [f"dice {k}: {v:.4f}" for k, v in d.get("dice", {}).items()]
    for key in ("tre_mean_mm", "psnr_db", "mi_nats", "cc"):
        if d.get(key) is not None:
            rows.append(f"{key}: {d[key]:.4f}")
    return "\n".join(rows)


def cmd_report(args) -> int:
    rows = []
    for r in args.runs:
        p = Path(r)
        path = p / "manifest.json" if p.is_dir() else p
        m = RunManifest.from_json(path.read_text())
        metrics = m.stage("evaluate").metrics
        rows.append({"run": str(path.parent), "status": m.status, "total_seconds": round(m.total_seconds, 3),
                     "stage_seconds": {s.name: round(s.seconds, 3) for s in m.stages},
                     "dice": metrics.get("dice", {}), "tre_mean_mm": metrics.get("tre_mean_mm")})
    if args.json:
        print(json.dumps(rows, indent=2, sort_keys=True))
    else:
        for r in rows:
            d = r["dice"]
            print(f"{r['run']}: {r['status']}  liver {d.get('liver', float('nan')):.4f}  "
                  f"tumor {d.get('tumor', float('nan')):.4f}  TRE {r['tre_mean_mm'] or float('nan'):.3f} mm  "
                  f"{r['total_seconds']:.1f} s")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2, sort_keys=True))
    return 0


COMMANDS = {"phantom": cmd_phantom_gen, "preprocess": cmd_preprocess, "train": cmd_train, "run": cmd_run,
            "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the exit-code contract needs a catch-all
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
