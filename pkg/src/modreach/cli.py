"""Command-line entry point: ``modreach <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data/model error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .control import ControlTrainer, eval_control, write_curve
from .e2e import FineTuner, combine, eval_e2e, report_row, write_report
from .gradcheck import TOL, run_suite
from .nn import ShapeError
from .perception import (
    Dataset,
    DatasetError,
    PerceptionTrainer,
    eval_perception,
    gen_dataset,
    load_dataset,
    new_perception_net,
    save_dataset,
)
from .render import Occluder, Renderer, write_pgm
from .sim import Arm, parse_scene

log = logging.getLogger("modreach")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4
CONFIG_ECHO = "effective_config.ini"


class UsageError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    for key, value in getattr(args, "_overrides", {}).items():
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _echo_config(cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(cfg.to_ini())


def _arm(cfg: RunConfig) -> Arm:
    return Arm(cfg.arm)


def _sim_pool(cfg: RunConfig, arm: Arm, renderer: Renderer) -> Dataset:
    """Style-A training pool drawn from its own stream so resumed runs see the same data."""
    n = cfg.perception.sim_pool
    log.info("rendering %d style-A training samples", n)
    return gen_dataset(n, "A", np.random.default_rng([cfg.seed, 1]), arm, renderer, seed=cfg.seed)


def _load_ds(path, dof) -> Dataset:
    ds = load_dataset(path)
    if ds.dof != dof:
        raise DatasetError(f"{path} holds dof={ds.dof} samples, run uses dof={dof}")
    return ds


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    cfg = _config(args)
    arm = _arm(cfg)
    ds = gen_dataset(args.count, args.style, np.random.default_rng(cfg.seed), arm, Renderer(arm, cfg.render),
                     augment_images=args.augment, seed=cfg.seed)
    out = Path(args.out)
    _echo_config(cfg, out.parent)
    save_dataset(out, ds)
    print(f"wrote {out} count={len(ds)} style={ds.style} sha256={sha256_file(out)}")
    return EXIT_OK


def cmd_train_perception(args) -> int:
    cfg = _config(args)
    pc = cfg.perception
    arm = _arm(cfg)
    renderer = Renderer(arm, cfg.render)
    out = Path(args.out_dir)
    _echo_config(cfg, out)
    ckpt = out / "perception.mdqn"

    data_b = _load_ds(args.data_b, arm.dof) if args.data_b else None
    if pc.p_real < 1.0:
        data_a = _load_ds(args.data_a, arm.dof) if args.data_a else _sim_pool(cfg, arm, renderer)
    else:
        data_a = None

    if args.resume and ckpt.exists():
        trainer = PerceptionTrainer.load(ckpt, pc)
        log.info("resumed perception run at step %d", trainer.step)
    else:
        if args.init:
            net = load_checkpoint(args.init).network()
        else:
            net = new_perception_net(arm.dof, np.random.default_rng([cfg.seed, 0]))
        trainer = PerceptionTrainer(net, pc, cfg.seed)

    every = args.checkpoint_every or pc.steps
    while trainer.step < pc.steps:
        trainer.train(data_a, data_b, min(every, pc.steps - trainer.step), pc.p_real, total_steps=pc.steps)
        trainer.save(ckpt)
    trainer.save(ckpt)
    with open(out / "perception_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows(trainer.trace)
    print(f"wrote {ckpt} step={trainer.step} sha256={sha256_file(ckpt)}")
    return EXIT_OK


def cmd_train_control(args) -> int:
    cfg = _config(args)
    cc = cfg.control
    arm = _arm(cfg)
    out = Path(args.out_dir)
    _echo_config(cfg, out)
    ckpt = out / "control.mdqn"
    if args.resume and ckpt.exists():
        trainer = ControlTrainer.load(ckpt, arm, cc)
        log.info("resumed control run at step %d", trainer.step)
    else:
        trainer = ControlTrainer(arm, cc, cfg.seed)
    every = args.checkpoint_every or cc.steps
    while trainer.step < cc.steps:
        trainer.train(min(every, cc.steps - trainer.step))
        trainer.save(ckpt)
    trainer.save(ckpt)
    curve = out / f"curve_{cc.method}_dof{arm.dof}.csv"
    write_curve(curve, trainer.curve)
    last = trainer.curve[-1] if trainer.curve else None
    if last:
        print(f"step={last['step']} success_rate={last['success_rate']:.3f} d_med_cm={last['d_med_cm']:.2f}")
    print(f"wrote {ckpt} sha256={sha256_file(ckpt)}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    fc = cfg.finetune
    arm = _arm(cfg)
    renderer = Renderer(arm, cfg.render)
    out = Path(args.out_dir)
    _echo_config(cfg, out)
    data_b = _load_ds(args.data_b, arm.dof) if args.data_b else None
    data_a = None
    if not fc.naive:
        data_a = _load_ds(args.data_a, arm.dof) if args.data_a else _sim_pool(cfg, arm, renderer)
    if args.resume and (out / "perception.mdqn").exists():
        tuner = FineTuner.load(out, arm, fc, data_a, data_b, renderer)
        log.info("resumed fine-tuning at step %d", tuner.step)
    else:
        if not (args.perception and args.control):
            raise UsageError("finetune needs --perception and --control checkpoints")
        net = combine(load_checkpoint(args.perception).network(), load_checkpoint(args.control).network())
        tuner = FineTuner(net, arm, fc, data_a, data_b, cfg.seed, renderer)
    every = args.checkpoint_every or fc.steps
    while tuner.step < fc.steps:
        tuner.train(min(every, fc.steps - tuner.step))
        tuner.save(out)
    tuner.save(out)
    with open(out / "finetune_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "task_loss", "perception_loss"])
        w.writerows(tuner.trace)
    for name in ("perception.mdqn", "control.mdqn"):
        print(f"wrote {out / name} sha256={sha256_file(out / name)}")
    return EXIT_OK


def _print_rows(rows, fields):
    print("  ".join(f"{f:>12}" for f in fields))
    for r in rows:
        print("  ".join(f"{r[f]:>12.4f}" if isinstance(r[f], float) else f"{str(r[f]):>12}" for f in fields))


def cmd_eval(args) -> int:
    cfg = _config(args)
    arm = _arm(cfg)
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    out = Path(args.out)
    _echo_config(cfg, out.parent)
    name = args.name or args.mode
    if args.mode == "perception":
        if not (args.perception and args.data):
            raise UsageError("perception eval needs --perception and --data")
        net = load_checkpoint(args.perception).network()
        ds = _load_ds(args.data, arm.dof)
        mu, sd, _ = eval_perception(net, ds)
        rows = [{"net": name, "style": ds.style, "count": len(ds), "e_mu": mu, "e_sigma": sd}]
        fields = ["net", "style", "count", "e_mu", "e_sigma"]
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
    else:
        if not args.control:
            raise UsageError(f"{args.mode} eval needs --control")
        control = load_checkpoint(args.control).network()
        if args.mode == "control":
            res = eval_control(control, arm, args.episodes, cfg.seed)
            rows = [report_row(name, "state", res)]
        else:
            if not args.perception:
                raise UsageError("e2e eval needs --perception")
            net = combine(load_checkpoint(args.perception).network(), control)
            res = eval_e2e(net, arm, args.episodes, args.style, cfg.seed, Renderer(arm, cfg.render), args.workers)
            rows = [report_row(name, args.style, res)]
        write_report(out, rows)
        fields = list(rows[0])
    _print_rows(rows, fields)
    print(f"wrote {out}")
    return EXIT_OK


def _parse_box(text: str) -> Occluder:
    parts = text.split(",")
    if len(parts) not in (4, 5):
        raise argparse.ArgumentTypeError("occluder is x0,y0,x1,y1[,value] in 84x84 pixels")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad occluder {text!r}") from None
    return Occluder(*vals)


def cmd_render(args) -> int:
    cfg = _config(args)
    arm = _arm(cfg)
    try:
        scene = parse_scene(args.scene)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(scene.q) != 3:
        raise UsageError("--scene needs three joint angles")
    img = Renderer(arm, cfg.render).render(scene, args.style, args.occlude or ())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, img)
    print(f"wrote {out} sha256={sha256_file(out)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    results = run_suite(cfg.seed, cfg.arm.dof, args.params)
    for r in results:
        print(f"{r.name:<14} max_rel_err={r.error:.3e} {'ok' if r.ok else 'FAIL'}")
    worst = max(r.error for r in results)
    print(f"max relative error {worst:.3e} (tolerance {TOL:g})")
    return EXIT_OK if all(r.ok for r in results) else EXIT_VERIFY


# -- parser ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file (default: $MODREACH_CONFIG)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--dof", type=int, choices=(1, 2, 3), help="active joints")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="modreach", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="render a labelled image dataset")
    g.add_argument("--style", choices=("A", "B"), default="A")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--augment", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    tp = sub.add_parser("train-perception", parents=[common], help="supervised image -> scene training")
    tp.add_argument("--data-a", help="style-A dataset (default: render a pool)")
    tp.add_argument("--data-b", help="style-B dataset")
    tp.add_argument("--p-real", type=float, dest="p_real")
    tp.add_argument("--steps", type=int)
    tp.add_argument("--init", help="start from this perception checkpoint")
    tp.add_argument("--out-dir", required=True)
    tp.add_argument("--resume", action="store_true")
    tp.add_argument("--checkpoint-every", type=int, default=0)
    tp.set_defaults(func=cmd_train_perception, _keys={"p_real": "perception.p_real", "steps": "perception.steps"})

    tc = sub.add_parser("train-control", parents=[common], help="Q-learning on scene configurations")
    tc.add_argument("--method", choices=("kgps", "egreedy"))
    tc.add_argument("--steps", type=int)
    tc.add_argument("--out-dir", required=True)
    tc.add_argument("--resume", action="store_true")
    tc.add_argument("--checkpoint-every", type=int, default=0)
    tc.set_defaults(func=cmd_train_control, _keys={"method": "control.method", "steps": "control.steps"})

    ft = sub.add_parser("finetune", parents=[common], help="end-to-end fine-tuning of perception + control")
    ft.add_argument("--perception")
    ft.add_argument("--control")
    ft.add_argument("--data-a")
    ft.add_argument("--data-b")
    ft.add_argument("--beta", type=float)
    ft.add_argument("--steps", type=int)
    ft.add_argument("--naive", action="store_true", default=None, help="task loss only")
    ft.add_argument("--out-dir", required=True)
    ft.add_argument("--resume", action="store_true")
    ft.add_argument("--checkpoint-every", type=int, default=0)
    ft.set_defaults(func=cmd_finetune,
                    _keys={"beta": "finetune.beta", "steps": "finetune.steps", "naive": "finetune.naive"})

    ev = sub.add_parser("eval", parents=[common], help="evaluate perception, control or the combined net")
    ev.add_argument("--mode", choices=("perception", "control", "e2e"), required=True)
    ev.add_argument("--perception")
    ev.add_argument("--control")
    ev.add_argument("--data", help="dataset for perception mode")
    ev.add_argument("--episodes", type=int, default=400)
    ev.add_argument("--style", choices=("A", "B"), default="A")
    ev.add_argument("--name", help="row label in the report")
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--out", default="report.csv")
    ev.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", parents=[common], help="write one scene as a PGM image")
    r.add_argument("--scene", required=True, help='e.g. "q=0,0,0;target=0.45,0.2"')
    r.add_argument("--style", choices=("A", "B"), default="A")
    r.add_argument("--occlude", type=_parse_box, action="append", metavar="X0,Y0,X1,Y1")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    gc.add_argument("--params", type=int, default=100, help="parameters sampled per network")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"modreach: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args._overrides = {key: getattr(args, attr) for attr, key in getattr(args, "_keys", {}).items()}
    args._overrides["arm.dof"] = args.dof
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"modreach: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DatasetError, ShapeError, OSError) as exc:
        print(f"modreach: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
