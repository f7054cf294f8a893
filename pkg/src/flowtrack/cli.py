"""Command line front end.

One entry point with subcommands: ``train-toy`` fits the toy model on
synthetic sequences, ``track`` runs the tracker over a frame directory,
``eval`` scores prediction files, ``ablate`` compares flow variants,
``emit-heatmap`` renders a response map, ``grad-check`` verifies gradients
against finite differences, ``mask-dump`` writes attention permission
grids.

Every command reads an optional config file plus repeated ``--set
key=value`` overrides (overrides win), then writes all outputs under
``paths.run_dir/<command>`` next to a ``config.txt`` snapshot of the
exact configuration used, so a run can be reproduced from its directory
alone. Identical config and seed give bit-identical text outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 failed gradient check.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as cf
from . import flow_mask as fm
from . import model as md
from . import numerics as nx
from . import pipeline as pl
from . import synth_bench as sb
from . import tokenization as tok
from .errors import ConfigError, FlowtrackError

GRAD_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    parser = _Parser(prog="flowtrack",
                     description="blocked-flow transformer tracker")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    commands = (
        ("train-toy", "train the toy model on synthetic sequences"),
        ("track", "track a target through a frame directory"),
        ("eval", "score predictions against ground truth"),
        ("ablate", "compare flow variants on the synthetic benchmark"),
        ("emit-heatmap", "render a classification heatmap"),
        ("grad-check", "verify gradients against finite differences"),
        ("mask-dump", "write attention permission grids"),
    )
    for name, help_text in commands:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, metavar="PATH",
                       help="config file (key = value lines)")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       dest="overrides", help="override a config key")
    return parser


def _load(args):
    if args.config is None:
        return cf.parse_config("", args.overrides)
    return cf.load_config(args.config, args.overrides)


def _run_dir(cfg, command):
    """Create the per-command output directory with its config snapshot."""
    path = os.path.join(cfg["paths.run_dir"], command)
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    return path


def _build_model(cfg):
    return md.TrackerModel(cfg.geometry(), cfg.encoder_config(),
                           seed=cfg["seed"])


def _require_checkpoint(cfg):
    path = cfg["paths.checkpoint"]
    if not path:
        raise ConfigError("a trained checkpoint is required",
                          key="paths.checkpoint")
    return path


# -- subcommands ---------------------------------------------------------


def _cmd_train_toy(cfg):
    run_dir = _run_dir(cfg, "train-toy")
    model = _build_model(cfg)
    base = cfg.synth_config()
    seq_cfgs = [replace(base, texture_seed=base.texture_seed + i,
                        seed=base.seed + i)
                for i in range(cfg["train.sequences"])]
    ckpt = os.path.join(run_dir, "model.ckpt")
    result = sb.train_toy(model, cfg.run_config(), seq_cfgs,
                          cfg["train.steps"], cfg["train.lr"],
                          seed=cfg["seed"], checkpoint_path=ckpt,
                          loss_weights=(cfg["loss.lambda_iou"],
                                        cfg["loss.lambda_l1"]))
    with open(os.path.join(run_dir, "losses.txt"), "w",
              encoding="ascii") as fh:
        for value in result.losses:
            fh.write(repr(value) + "\n")
    print(f"trained {cfg['train.steps']} steps on "
          f"{len(seq_cfgs)} sequences")
    print(f"final loss {result.losses[-1]:.6f}")
    print(f"data digest {result.data_digest}")
    print(f"checkpoint {ckpt}")
    return 0


def _cmd_track(cfg):
    run_dir = _run_dir(cfg, "track")
    seq_dir = cfg["paths.sequence"]
    if not seq_dir:
        raise ConfigError("track needs a sequence directory",
                          key="paths.sequence")
    ckpt = _require_checkpoint(cfg)
    frames, gt = pl.load_sequence_dir(seq_dir)
    model = _build_model(cfg)
    model.store.load_arrays(nx.load_checkpoint(ckpt))
    boxes, confs = pl.track_sequence(model, cfg.run_config(), frames, gt[0])
    pred_path = os.path.join(run_dir, "predictions.txt")
    pl.write_predictions(pred_path, boxes, confs)
    print(f"tracked {len(frames)} frames")
    print(f"predictions {pred_path}")
    if len(gt) == len(frames) and len(frames) > 1:
        # frame 0 echoes the ground truth, so score the rest
        report = sb.compute_metrics(boxes[1:], gt[1:],
                                    frame_shape=frames[0].shape[:2])
        sb.write_metrics_jsonl(os.path.join(run_dir, "metrics.jsonl"),
                               [report])
        print(f"AO = {100.0 * report.ao:.2f}%")
    return 0


def _cmd_eval(cfg):
    run_dir = _run_dir(cfg, "eval")
    pred_path = cfg["paths.predictions"]
    gt_path = cfg["paths.boxes"]
    if cfg["paths.sequence"]:
        seq = cfg["paths.sequence"]
        pred_path = pred_path or os.path.join(seq, "predictions.txt")
        gt_path = gt_path or os.path.join(seq, "groundtruth.txt")
    if not pred_path or not gt_path:
        raise ConfigError(
            "eval needs paths.sequence or both paths.predictions and "
            "paths.boxes", key="paths.predictions")
    report = sb.compute_metrics(pl.read_boxes(pred_path),
                                pl.read_boxes(gt_path))
    sb.write_metrics_jsonl(os.path.join(run_dir, "metrics.jsonl"), [report])
    print(f"AO = {100.0 * report.ao:.2f}%")
    print(f"SR50 = {100.0 * report.sr50:.2f}%")
    print(f"SR75 = {100.0 * report.sr75:.2f}%")
    print(f"precision = {100.0 * report.precision:.2f}%")
    return 0


def _cmd_ablate(cfg):
    run_dir = _run_dir(cfg, "ablate")
    protocol = sb.AblationProtocol(
        run=cfg.run_config(), d=cfg["encoder.d"], h=cfg["encoder.h"],
        n_layers=cfg["encoder.n_layers"], ffn_dim=cfg["encoder.ffn_dim"],
        partition_layer=cfg["flow.partition_layer"],
        k_top=cfg["flow.k_top"], elimination=cfg["flow.elimination"],
        steps=cfg["train.steps"], lr=cfg["train.lr"])
    # the benchmark data recipe is fixed; synth.* keys do not affect it
    train_cfgs, eval_cfgs = sb.toy_protocol_data(
        cfg["ablate.train_sequences"], cfg["ablate.eval_sequences"])
    result = sb.run_ablation(cfg["ablate.variants"], train_cfgs, eval_cfgs,
                             protocol, cfg["ablate.seeds"])
    table = result.format_text()
    with open(os.path.join(run_dir, "table.txt"), "w",
              encoding="ascii") as fh:
        fh.write(table + "\n")
    with open(os.path.join(run_dir, "table.csv"), "w",
              encoding="ascii") as fh:
        fh.write(result.format_csv() + "\n")
    print(table)
    return 0


def _cmd_emit_heatmap(cfg):
    run_dir = _run_dir(cfg, "emit-heatmap")
    model = _build_model(cfg)
    if cfg["paths.checkpoint"]:
        model.store.load_arrays(nx.load_checkpoint(cfg["paths.checkpoint"]))
    frames, boxes = sb.gen_sequence(cfg.synth_config())
    if len(frames) < 2:
        raise ConfigError("heatmap needs a sequence of >= 2 frames",
                          key="synth.n_frames")
    run_cfg = cfg.run_config()
    state = pl.init(frames[0], boxes[0], model, run_cfg)
    # same crop the tracker would score on the second frame
    crop, _ = pl.search_crop(frames[1], state.last_box, run_cfg)
    maps, _, _ = model.forward_tokens(state.z_tokens, state.dt_tokens,
                                      state.db_tokens,
                                      model.tokenize_search(crop))
    heat_path = os.path.join(run_dir, "heatmap.pgm")
    over_path = os.path.join(run_dir, "overlay.ppm")
    sb.emit_heatmap(maps.cls.data, heat_path)
    sb.emit_overlay(maps.cls.data, crop, over_path)
    print(f"heatmap {heat_path}")
    print(f"overlay {over_path}")
    return 0


def _cmd_grad_check(cfg):
    run_dir = _run_dir(cfg, "grad-check")
    err = sb.grad_fidelity(seed=cfg["seed"])
    ok = bool(err < GRAD_TOLERANCE)
    verdict = "pass" if ok else "FAIL"
    line = (f"max rel error {err:.6e} "
            f"(tolerance {GRAD_TOLERANCE:.0e}): {verdict}")
    with open(os.path.join(run_dir, "gradcheck.txt"), "w",
              encoding="ascii") as fh:
        fh.write(line + "\n")
    print(line)
    return 0 if ok else 3


def _descending(n):
    # fixed relevance profile: structural dumps rank search tokens by index
    return np.arange(n, 0, -1, dtype=np.float64)


def _cmd_mask_dump(cfg):
    run_dir = _run_dir(cfg, "mask-dump")
    mask_dir = os.path.join(run_dir, "masks")
    os.makedirs(mask_dir, exist_ok=True)
    geo = cfg.geometry()
    count = 0
    for variant in fm.VARIANTS:
        policy = fm.FlowPolicy(
            variant=variant, partition_layer=cfg["flow.partition_layer"],
            k_top=cfg["flow.k_top"], elimination=cfg["flow.elimination"],
            n_layers=cfg["encoder.n_layers"],
            partition_mode=cfg["flow.partition_mode"],
            omega_reduce=cfg["flow.omega_reduce"])
        uses_dt, uses_db = md.variant_groups(variant)
        layout = tok.make_layout(geo.z_grid, geo.z_grid if uses_dt else (0, 0),
                                 geo.n_db if uses_db else 0, geo.x_grid)
        elim_at = dict(policy.elimination)
        partition = None
        for layer in range(1, policy.n_layers + 1):
            mask = fm.build_mask(policy, layout, layer, partition=partition)
            name = f"{variant}_layer{layer:02d}.txt"
            fm.dump_mask(mask, os.path.join(mask_dir, name))
            count += 1
            # mirror the encoder's bookkeeping between layers
            if policy.uses_partition and layer >= policy.partition_layer:
                if partition is None or policy.partition_mode == "per_layer":
                    partition = fm.topk_partition(_descending(layout.n_x),
                                                  policy.k_top)
            p_elim = elim_at.get(layer, 0)
            if p_elim:
                protect = partition.xt if partition is not None else None
                fm.select_elimination(_descending(layout.n_x), p_elim,
                                      protect=protect)
                layout = layout.with_search_count(layout.n_x - p_elim)
                if partition is not None:
                    partition = fm.topk_partition(_descending(layout.n_x),
                                                  policy.k_top)
    print(f"wrote {count} mask grids to {mask_dir}")
    return 0


_COMMANDS = {
    "train-toy": _cmd_train_toy,
    "track": _cmd_track,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "emit-heatmap": _cmd_emit_heatmap,
    "grad-check": _cmd_grad_check,
    "mask-dump": _cmd_mask_dump,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FlowtrackError, OSError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
