"""Command-line entry point: ``embryostage <subcommand> [options]``.

Every subcommand accepts ``--seed``, ``--threads`` and ``--config``. The
config file is JSON whose keys are option names (``n_start`` or
``n-start``); options given on the command line win over the file.

Exit codes: 0 success, 1 user error (bad arguments or input files),
2 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .core import StageLabelMap
from .pointnet import AugmentConfig, NormalizationSpec, predict_ensemble
from .reference import ReferenceConfig, generate_reference
from .simulation import SimConfig, simulate
from .storage import (CSV_HEADER, load_checkpoint, load_cloud_csv, load_dataset, load_embryo_csv, load_manifest,
                      ManifestEntry, save_checkpoint, save_embryo_csv, write_json, write_loss_csv)
from .training import TrainConfig, TrainingError, cross_validate, evaluate, train

log = logging.getLogger("embryostage")


class UserError(Exception):
    """Bad invocation or input; reported without a traceback, exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- parser ----------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    g.add_argument("--threads", type=int, default=1, help="worker threads; 1 is bit-reproducible (default 1)")
    g.add_argument("--config", type=Path, help="JSON file with option defaults")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _labels(p):
    p.add_argument("--hpf-start", type=float, default=4.7, help="stage of the first frame (default 4.7)")
    p.add_argument("--hpf-end", type=float, default=10.0, help="stage of the last frame (default 10.0)")


def _dataset(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", type=Path, help="JSON dataset manifest")
    src.add_argument("--data", type=Path, nargs="+", help="embryo CSV files (ids are file stems)")
    _labels(p)


def _training(p):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate, help=f"ADAM learning rate (default {d.learning_rate})")
    p.add_argument("--lr-decay", type=float, default=d.lr_decay)
    p.add_argument("--lr-decay-every", type=int, default=d.lr_decay_every)
    p.add_argument("--sample-size", type=int, default=d.sample_size, help="points per cloud (default 4096)")
    p.add_argument("--runs", type=int, default=d.ensemble_runs, help="ensemble runs per frame (default 25)")
    p.add_argument("--ortho-weight", type=float, default=d.ortho_weight)
    p.add_argument("--no-rotation", action="store_true", help="disable random rotation augmentation")
    p.add_argument("--jitter-sigma", type=float, default=d.augment.jitter_sigma)
    p.add_argument("--jitter-clip", type=float, default=d.augment.jitter_clip)
    p.add_argument("--normalization", choices=["center_scale", "center"], default=d.normalization.mode)
    p.add_argument("--scale", type=float, default=d.normalization.scale, help="um per unit for center_scale")
    p.add_argument("--loss-csv", type=Path, help="write per-epoch training loss here")


def _inference(p):
    p.add_argument("--model", type=Path, required=True, help="checkpoint manifest")
    p.add_argument("--runs", type=int, help="ensemble runs (default: from checkpoint, else 25)")
    p.add_argument("--sample-size", type=int, help="points per run (default: from checkpoint, else 4096)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="embryostage", description="Point-cloud embryo staging toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-reference", parents=[common], help="write a procedural reference embryo")
    d = ReferenceConfig()
    p.add_argument("--frames", type=int, default=d.n_frames)
    p.add_argument("--n-start", type=int, default=d.n_start)
    p.add_argument("--n-end", type=int, default=d.n_end)
    p.add_argument("--radius", type=float, default=d.radius, help="sphere radius in um")
    _labels(p)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.set_defaults(func=cmd_gen_reference)

    p = sub.add_parser("simulate", parents=[common], help="synthesize a simulated embryo from a reference")
    d = SimConfig()
    p.add_argument("--ref", type=Path, required=True, help="reference embryo CSV")
    p.add_argument("-p", type=float, default=d.p, help="fraction of reference counts to keep (default 0.75)")
    p.add_argument("-k", type=int, default=d.k, help="reference neighbours for the flow (default 5)")
    p.add_argument("--density-radius", type=float, default=d.density_radius)
    p.add_argument("--strategy", choices=["density", "random"], default="density")
    _labels(p)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train a stage regressor")
    _dataset(p)
    _training(p)
    p.add_argument("--held-out", help="embryo id excluded from training")
    p.add_argument("-o", "--output", type=Path, required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="print predicted hpf per frame, or for one cloud")
    _inference(p)
    p.add_argument("input", type=Path, help="embryo CSV or a cloud CSV with x_um,y_um,z_um")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score a model on a labelled embryo")
    _inference(p)
    p.add_argument("--data", type=Path, required=True, help="embryo CSV")
    _labels(p)
    p.add_argument("-o", "--output", type=Path, help="report JSON (default stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cross-validate", parents=[common], help="leave-one-embryo-out cross-validation")
    _dataset(p)
    _training(p)
    p.add_argument("--checkpoint-dir", type=Path, help="save each fold's model here")
    p.add_argument("-o", "--output", type=Path, help="report JSON (default stdout)")
    p.set_defaults(func=cmd_cross_validate)
    return parser


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in commands), None)
    if known.config is not None and command is not None:
        _apply_config(commands[command], command, known.config)
    return parser.parse_args(argv)


def _apply_config(sub, command, path):
    """Install the config file's values as defaults of subcommand ``sub``."""
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UserError(f"{path}: expected a JSON object")
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help", "func"):
            raise UserError(f"{path}: unknown option {key!r} for {command}")
        action = actions[dest]
        if action.type is not None and value is not None:
            value = [action.type(v) for v in value] if action.nargs == "+" else action.type(value)
        defaults[dest] = value
        action.required = False
    for group in sub._mutually_exclusive_groups:
        if any(a.dest in defaults for a in group._group_actions):
            group.required = False
    sub.set_defaults(**defaults)


# -- commands --------------------------------------------------------------------


def cmd_gen_reference(args):
    cfg = ReferenceConfig(n_frames=args.frames, n_start=args.n_start, n_end=args.n_end, radius=args.radius,
                          hpf_start=args.hpf_start, hpf_end=args.hpf_end, seed=args.seed)
    embryo = generate_reference(cfg)
    save_embryo_csv(embryo, args.output)
    log.info("wrote %d frames, %d -> %d points, to %s", len(embryo), embryo.counts()[0], embryo.counts()[-1],
             args.output)


def cmd_simulate(args):
    ref = load_embryo_csv(args.ref, hpf_start=args.hpf_start, hpf_end=args.hpf_end)
    cfg = SimConfig(p=args.p, k=args.k, density_radius=args.density_radius, seed=args.seed)
    sim = simulate(ref, cfg, strategy=args.strategy)
    save_embryo_csv(sim, args.output)
    log.info("wrote %d frames, %d -> %d objects, to %s", len(sim), sim.counts()[0], sim.counts()[-1], args.output)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
        sample_size=args.sample_size, ensemble_runs=args.runs,
        augment=AugmentConfig(rotation=not args.no_rotation, jitter_sigma=args.jitter_sigma,
                              jitter_clip=args.jitter_clip),
        normalization=NormalizationSpec(mode=args.normalization, scale=args.scale),
        lr_decay=args.lr_decay, lr_decay_every=args.lr_decay_every, ortho_weight=args.ortho_weight,
        threads=args.threads,
    )


def _load_data(args):
    if args.manifest is not None:
        entries = load_manifest(args.manifest)
    else:
        lm = StageLabelMap(args.hpf_start, args.hpf_end, 2)
        entries = [ManifestEntry(p.stem, p, lm) for p in args.data]
        ids = [e.embryo_id for e in entries]
        if len(set(ids)) != len(ids):
            raise UserError("--data files must have distinct names (ids are file stems)")
    return load_dataset(entries)


def cmd_train(args):
    cfg = _train_config(args)
    embryos = _load_data(args)
    if len(embryos) < 2 and args.held_out is not None:
        raise UserError("need at least 2 embryos when holding one out")
    result = train(embryos, cfg, held_out=args.held_out)
    save_checkpoint(result.model, args.output, cfg.normalization, training=cfg.to_dict(),
                    extra={"train_ids": result.train_ids, "held_out": args.held_out})
    if args.loss_csv:
        write_loss_csv({"train": result.epoch_losses}, args.loss_csv)
    log.info("final epoch loss %.5f h^2; checkpoint %s", result.epoch_losses[-1], args.output)


def _inference_config(args, ck) -> TrainConfig:
    trained = ck.training
    return TrainConfig(
        seed=args.seed, threads=args.threads, normalization=ck.normalization,
        sample_size=args.sample_size or trained.get("sample_size", 4096),
        ensemble_runs=args.runs or trained.get("ensemble_runs", 25),
    )


def _is_embryo_csv(path: Path) -> bool:
    with open(path, encoding="utf-8") as fh:
        return fh.readline().rstrip("\r\n").split(",") == CSV_HEADER


def cmd_predict(args):
    ck = load_checkpoint(args.model)
    cfg = _inference_config(args, ck)
    if _is_embryo_csv(args.input):
        embryo = load_embryo_csv(args.input)
        report = evaluate(ck.model, embryo, cfg)
        values = report.pred_hpf
    else:
        cloud = load_cloud_csv(args.input)
        values = [predict_ensemble(ck.model, cloud, runs=cfg.ensemble_runs, seed=cfg.seed,
                                   sample_size=cfg.sample_size, norm=cfg.normalization).mean]
    sys.stdout.write("".join(f"{v!r}\n" for v in values))


def cmd_evaluate(args):
    ck = load_checkpoint(args.model)
    cfg = _inference_config(args, ck)
    embryo = load_embryo_csv(args.data, hpf_start=args.hpf_start, hpf_end=args.hpf_end)
    report = evaluate(ck.model, embryo, cfg, embryo_id=args.data.stem)
    _emit(report.to_dict(), args.output)


def cmd_cross_validate(args):
    cfg = _train_config(args)
    embryos = _load_data(args)
    if len(embryos) < 2:
        raise UserError("cross-validation needs at least 2 embryos")
    if args.checkpoint_dir:
        args.checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def on_fold(eid, result, report):
        log.info("fold %s: MAE %.3f h", eid, report.mae)
        if args.checkpoint_dir:
            save_checkpoint(result.model, args.checkpoint_dir / f"fold-{eid}.ckpt", cfg.normalization,
                            training=cfg.to_dict(), extra={"held_out": eid})

    report = cross_validate(embryos, cfg, on_fold=on_fold)
    if args.loss_csv:
        write_loss_csv(report.losses, args.loss_csv)
    _emit({"config": cfg.to_dict(), **report.to_dict()}, args.output)


def _emit(obj, path):
    if path is None:
        sys.stdout.write(json.dumps(obj, indent=2) + "\n")
    else:
        write_json(obj, path)


# -- entry point -----------------------------------------------------------------


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse: --help (0) or usage error (1)
        return int(exc.code or 0)
    except UserError as exc:
        print(f"embryostage: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("embryostage: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except (UserError, TrainingError, OSError, ValueError) as exc:
        print(f"embryostage {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - last-resort report
        traceback.print_exc()
        print(f"embryostage {args.command}: internal error", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
