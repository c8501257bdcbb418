"""Command-line entry point: ``earlypred {gen-data,train,eval,gradcheck,curve}``.

Exit codes: 0 success, 1 usage error, 2 runtime or data error, 3 numerical
abort (a diverged loss, or a failed gradient check).

Every subcommand writes a ``config_<subcommand>.json`` echo of its fully
resolved configuration next to its outputs. ``EARLYPRED_REPORT_DIR`` sets the
default report directory (``reports`` otherwise).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from . import __version__
from .data import MODALITIES, DatasetError, SynthSpec, load_dataset, save_dataset, synthesize
from .diffcore import DimensionError
from .evaluation import EvaluationError, curve_csv, evaluate, evaluate_fused, load_report, write_report
from .model import VARIANTS, CheckpointError, ModelBundle, ModelDims, load_checkpoint, save_checkpoint
from .train import ADV_FORMS, NumericalDivergence, TrainConfig, train_two_stage

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_DIR_ENV = "EARLYPRED_REPORT_DIR"
FAULT_SCALE = 1.01  # analytic-gradient scale used by the hidden fault-injection flag


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def default_report_dir() -> Path:
    return Path(os.environ.get(REPORT_DIR_ENV) or "reports")


def dataset_paths(data_dir, modality: str = "a") -> tuple[Path, Path]:
    d = Path(data_dir)
    return d / f"train-{modality}.eapd", d / f"test-{modality}.eapd"


def _echo(out_dir: Path, command: str, config: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"config_{command}.json"
    body = {"command": command, "version": __version__, **config}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _add_gen_data(sub) -> None:
    p = sub.add_parser("gen-data", help="synthesize train/test dataset files")
    d = SynthSpec.__dataclass_fields__
    p.add_argument("--out", default="data", help="output directory (default: %(default)s)")
    p.add_argument("--c", type=int, default=d["n_classes"].default, help="number of classes")
    p.add_argument("--k", type=int, default=d["n_segments"].default, help="segments per sequence")
    p.add_argument("--d-raw", type=int, default=d["d_raw"].default)
    p.add_argument("--n-train", type=int, default=d["n_train"].default)
    p.add_argument("--n-test", type=int, default=d["n_test"].default)
    p.add_argument("--alpha", type=float, default=d["ambiguity"].default, help="pre-onset ambiguity in [0, 1]")
    p.add_argument("--onset", type=int, nargs=2, metavar=("LO", "HI"), default=list(d["onset"].default))
    p.add_argument("--sigma", type=float, default=d["sigma"].default)
    p.add_argument("--appearance", type=float, default=d["appearance"].default)
    p.add_argument("--drift", type=float, default=d["drift"].default)
    p.add_argument("--spacing", type=float, default=d["spacing"].default)
    p.add_argument("--signature", type=float, default=d["signature"].default)
    p.add_argument("--opening", type=float, default=d["opening"].default)
    p.add_argument("--ramp", type=int, default=d["ramp"].default)
    p.add_argument("--seed", type=int, default=d["seed"].default)
    p.add_argument("--modality", choices=MODALITIES + ("both",), default="a")
    p.set_defaults(func=cmd_gen_data)


def spec_from_args(a) -> SynthSpec:
    return SynthSpec(n_classes=a.c, n_segments=a.k, d_raw=a.d_raw, n_train=a.n_train, n_test=a.n_test,
                     ambiguity=a.alpha, onset=tuple(a.onset), sigma=a.sigma, appearance=a.appearance,
                     drift=a.drift, spacing=a.spacing, signature=a.signature, opening=a.opening,
                     ramp=a.ramp, seed=a.seed)


def cmd_gen_data(a) -> int:
    spec = spec_from_args(a)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    mods = MODALITIES if a.modality == "both" else (a.modality,)
    written = []
    for m in mods:
        train, test = synthesize(spec, m)
        p_train, p_test = dataset_paths(out, m)
        save_dataset(p_train, train)
        save_dataset(p_test, test)
        written += [str(p_train), str(p_test)]
    _echo(out, "gen-data", {"spec": spec.to_dict(), "modalities": list(mods), "files": written})
    for w in written:
        print(w)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _add_train(sub) -> None:
    p = sub.add_parser("train", help="two-stage training of one model")
    t = {f.name: f.default for f in fields(TrainConfig)}
    m = {f.name: f.default for f in fields(ModelDims)}
    p.add_argument("--data", default="data", help="dataset directory written by gen-data")
    p.add_argument("--train-file", help="explicit training dataset file (overrides --data)")
    p.add_argument("--modality", choices=MODALITIES, default="a")
    p.add_argument("--out", default="run", help="output directory (default: %(default)s)")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--stage1-only", action="store_true", help="skip adversarial training")
    p.add_argument("--seed", type=int, default=t["seed"])
    # stage 1
    p.add_argument("--lr1", type=float, default=t["lr1"])
    p.add_argument("--momentum", type=float, default=t["momentum"])
    p.add_argument("--weight-decay", type=float, default=t["weight_decay"])
    p.add_argument("--lr-decay", type=float, default=t["lr_decay"])
    p.add_argument("--lr-step", type=int, default=t["lr_step"])
    p.add_argument("--iters1", type=int, default=t["iters1"])
    # stage 2
    p.add_argument("--lr2", type=float, default=t["lr2"])
    p.add_argument("--weight-decay2", type=float, default=t["weight_decay2"])
    p.add_argument("--beta1", type=float, default=t["beta1"])
    p.add_argument("--beta2", type=float, default=t["beta2"])
    p.add_argument("--adam-eps", type=float, default=t["adam_eps"])
    p.add_argument("--lambda", dest="lam", type=float, default=t["lam"], help="classification-loss weight")
    p.add_argument("--d-steps", type=int, default=t["d_steps"], help="discriminator updates per generator update")
    p.add_argument("--iters2", type=int, default=t["iters2"])
    p.add_argument("--batch", type=int, default=t["batch"])
    p.add_argument("--train-encoder", action="store_true", help="also update the encoder in stage 2")
    p.add_argument("--freeze-perceptual", action="store_true", help="hold the perceptual head fixed in stage 2")
    p.add_argument("--adv-form", choices=ADV_FORMS, default=t["adv_form"])
    p.add_argument("--no-full-views", action="store_true", help="exclude k=K views from generator batches")
    # model sizes
    p.add_argument("--d-feat", type=int, default=m["d_feat"])
    p.add_argument("--d-hidden", type=int, default=m["d_hidden"])
    p.add_argument("--d-enc", type=int, default=m["d_enc"])
    p.add_argument("--widths", type=int, nargs=2, default=list(m["widths"]))
    p.add_argument("--lstm-layers", type=int, default=m["lstm_layers"])
    p.add_argument("--random-residual", action="store_true", help="random instead of zero residual init")
    p.set_defaults(func=cmd_train)


def train_config_from_args(a) -> TrainConfig:
    return TrainConfig(lr1=a.lr1, momentum=a.momentum, weight_decay=a.weight_decay, lr_decay=a.lr_decay,
                       lr_step=a.lr_step, iters1=a.iters1, lr2=a.lr2, weight_decay2=a.weight_decay2,
                       beta1=a.beta1, beta2=a.beta2, adam_eps=a.adam_eps, lam=a.lam, d_steps=a.d_steps,
                       iters2=a.iters2, batch=a.batch, seed=a.seed, freeze_encoder=not a.train_encoder,
                       freeze_perceptual=a.freeze_perceptual, adv_form=a.adv_form,
                       include_full_views=not a.no_full_views)


def cmd_train(a) -> int:
    path = Path(a.train_file) if a.train_file else dataset_paths(a.data, a.modality)[0]
    if not path.exists():
        raise DatasetError(f"training dataset not found: {path}")
    train = load_dataset(path)
    cfg = train_config_from_args(a)
    dims = ModelDims(d_raw=train.d_raw, d_feat=a.d_feat, d_hidden=a.d_hidden, d_enc=a.d_enc,
                     n_classes=train.n_classes, n_segments=train.n_segments, widths=tuple(a.widths),
                     lstm_layers=a.lstm_layers, zero_residual=not a.random_residual)
    resolved = {"variant": a.variant, "stage1_only": a.stage1_only, "train": cfg.to_dict(),
                "dims": dims.to_dict(), "dataset": {"seed": train.seed, "n": len(train)}}
    out = Path(a.out)
    _echo(out, "train", {**resolved, "paths": {"train": str(path), "out": str(out)}})
    bundle = ModelBundle.create(dims, a.variant, seed=a.seed, config=resolved)
    log = train_two_stage(bundle, train, cfg, stage1_only=a.stage1_only)
    save_checkpoint(out / "model.ckpt", bundle)
    log.save(out / "trainlog.csv")
    # wall-clock times vary between runs, so they live in a sidecar
    (out / "timing.json").write_text(json.dumps(log.wall_clock, indent=2, sort_keys=True) + "\n")
    final = log.stage("stage1-eval")
    if final:
        print(f"stage 1 full-sequence train accuracy {final[-1]['acc']:.4f}")
    print(out / "model.ckpt")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="accuracy at every observation ratio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="test dataset file")
    p.add_argument("--fuse", metavar="CHECKPOINT", help="second-stream checkpoint to fuse with")
    p.add_argument("--fuse-test", metavar="FILE", help="second-stream test dataset file")
    p.add_argument("--out", help=f"report directory (default: ${REPORT_DIR_ENV} or ./reports)")
    p.add_argument("--prefix", default=None, help="report file prefix (default: eval, or fused)")
    p.set_defaults(func=cmd_eval)


def cmd_eval(a) -> int:
    if bool(a.fuse) != bool(a.fuse_test):
        raise UsageError("eval: --fuse and --fuse-test must be given together")
    out = Path(a.out) if a.out else default_report_dir()
    prefix = a.prefix or ("fused" if a.fuse else "eval")
    bundle = load_checkpoint(a.checkpoint)
    test = load_dataset(a.test)
    if a.fuse:
        other = load_checkpoint(a.fuse)
        report = evaluate_fused(bundle, other, test, load_dataset(a.fuse_test))
        title = f"fused {bundle.variant} + {other.variant} models"
    else:
        report = evaluate(bundle, test)
        title = f"{bundle.variant} model"
    _echo(out, "eval", {"checkpoint": a.checkpoint, "test": a.test, "fuse": a.fuse, "fuse_test": a.fuse_test,
                        "prefix": prefix, "out": str(out)})
    paths = write_report(report, out, prefix, title=title)
    print(f"average accuracy {report.average:.4f} over {report.n_segments} ratios")
    for p in paths.values():
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def _add_gradcheck(sub) -> None:
    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--components", nargs="+", metavar="NAME", help="subset to check (default: all)")
    p.add_argument("--list", action="store_true", help="list component names and exit")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=f"report directory (default: ${REPORT_DIR_ENV} or ./reports)")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)


def cmd_gradcheck(a) -> int:
    from .gradsuite import COMPONENTS, run_gradcheck

    if a.list:
        print("\n".join(COMPONENTS))
        return EXIT_OK
    unknown = [c for c in a.components or () if c not in COMPONENTS]
    if unknown:
        raise UsageError(f"gradcheck: unknown component(s) {', '.join(unknown)}; see --list")
    out = Path(a.out) if a.out else default_report_dir()
    _echo(out, "gradcheck", {"components": a.components or list(COMPONENTS), "tol": a.tol, "seed": a.seed,
                             "inject_fault": a.inject_fault})
    reports = run_gradcheck(a.components, seed=a.seed, rel_tol=a.tol,
                            corrupt=FAULT_SCALE if a.inject_fault else 1.0)
    lines = [r.line() for r in reports]
    n_fail = sum(not r.passed for r in reports)
    worst = max(r.max_rel_error for r in reports)
    lines.append(f"{len(reports) - n_fail}/{len(reports)} passed, max relative error {worst:.3e} (tol {a.tol:g})")
    text = "\n".join(lines) + "\n"
    (out / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if n_fail == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# curve
# ---------------------------------------------------------------------------


def _add_curve(sub) -> None:
    p = sub.add_parser("curve", help="re-emit the accuracy curve file from a saved report")
    p.add_argument("--report", required=True, help="a *_report.json written by eval")
    p.add_argument("--out", default="-", help="curve CSV path, or - for stdout (default)")
    p.set_defaults(func=cmd_curve)


def cmd_curve(a) -> int:
    report = load_report(a.report)
    text = curve_csv(report)
    if a.out == "-":
        sys.stdout.write(text)
        return EXIT_OK
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    _echo(out.parent, "curve", {"report": a.report, "out": str(out)})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="earlypred", description="Early action prediction on partial segment sequences.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for add in (_add_gen_data, _add_train, _add_eval, _add_gradcheck, _add_curve):
        add(sub)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except NumericalDivergence as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, EvaluationError, DimensionError, KeyError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
