"""Command-line surface: dataset export, training, completion, sweeps, eval.

Grammar:
  magic <dataset|train-backbone|train-mcu|complete|sweep|eval>
        --config <file> [--out <dir>] [--seed N] [--force]

Every run directory receives config.echo (the fully resolved settings) and
artifacts under checkpoints/, samples/, traces/, metrics.csv by convention.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, cmb, config as cfgmod, data, evalsuite, guidance, imageio
from . import schedule as sch, toyworld as tw, unet
from .rngstream import derive_seed

EVAL_BATCH = 25  # fixed sampling batch so runs are bit-reproducible


class CliError(RuntimeError):
    pass


def _prepare_out(out_dir, force):
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError(f"{out} exists and is not empty (use --force)")
    for sub in ("checkpoints", "samples", "traces"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg, out):
    (out / "config.echo").write_text(cfg.echo(), encoding="utf-8")


def _schedule(cfg):
    s = cfg["schedule"]
    return sch.make_schedule(
        "linear", s["t_train"], s["beta_start"], s["beta_end"], s["t_sample"]
    )


def _unet_config(cfg):
    b = cfg["backbone"]
    return unet.UNetConfig(
        image_size=cfg.get("data", "size"),
        base_channels=b["base_channels"],
        channel_mults=tuple(b["channel_mults"]),
        blocks_per_scale=b["blocks_per_scale"],
        time_embed_dim=b["time_embed_dim"],
        cond_embed_classes=b["cond_embed_classes"],
    )


def _train_config(section, seed_override=None):
    return unet.TrainConfig(
        steps=section["steps"],
        batch_size=section["batch_size"],
        lr=section["lr"],
        seed=section["seed"] if seed_override is None else seed_override,
    )


def _split_seeds(split, limit):
    seeds = list(tw.split_seeds(split))
    return seeds if limit <= 0 else seeds[:limit]


def _dataset(cfg, split, modalities=()):
    limit = cfg.get("data", f"{split}_limit")
    return data.SceneDataset(
        _split_seeds(split, limit), size=cfg.get("data", "size"), modalities=modalities
    )


def _write_loss_csv(path, losses):
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(v)])


def cmd_dataset(cfg, out_dir, force):
    out = _prepare_out(out_dir, force)
    _echo(cfg, out)
    size = cfg.get("data", "size")
    manifest = []
    for split in ("train", "val", "test"):
        for seed in _split_seeds(split, cfg.get("data", f"{split}_limit")):
            scene = tw.generate_scene(seed, tw.SceneConfig(size=size))
            stem = out / "samples" / f"{seed:06d}"
            imageio.write_pgm(f"{stem}_image.pgm", scene.image)
            imageio.write_pgm(f"{stem}_mask.pgm", tw.random_mask(seed, size))
            imageio.write_pgm(f"{stem}_edge.pgm", tw.extract_modality(scene, "edge"))
            imageio.write_pgm(f"{stem}_sketch.pgm", tw.extract_modality(scene, "sketch"))
            imageio.write_pgm(f"{stem}_depth.pgm", tw.extract_modality(scene, "depth"))
            seg = tw.extract_modality(scene, "segmentation")
            ids = np.argmax(seg, axis=0).astype(np.float64) / (tw.NUM_SEG_CLASSES - 1)
            imageio.write_pgm(f"{stem}_seg.pgm", ids[None])
            manifest.append(f"{seed},{split}")
    (out / "manifest.txt").write_text("\n".join(manifest) + ("\n" if manifest else ""))
    print(f"wrote {len(manifest)} scenes to {out}")
    return 0


def cmd_train_backbone(cfg, out_dir, force):
    out = _prepare_out(out_dir, force)
    _echo(cfg, out)
    sched = _schedule(cfg)
    ds = _dataset(cfg, "train")
    opt = _train_config(cfg["backbone"])
    resume = cfg.get("backbone", "checkpoint")
    if resume:
        net, sched, meta = unet.load_backbone(resume)
        offset = int(meta.get("steps", "0"))
        losses = unet.train_net(net, net.params(), sched, ds, opt, step_offset=offset)
        total = offset + opt.steps
    else:
        net, losses = unet.train_backbone(_unet_config(cfg), sched, ds, opt)
        total = opt.steps
    path = out / "checkpoints" / "backbone.mgk"
    unet.save_backbone(
        path, net, sched, opt,
        extra_meta={"steps": str(total), "final_loss": repr(losses[-1] if losses else math.nan)},
    )
    _write_loss_csv(out / "loss.csv", losses)
    print(f"backbone checkpoint: {path}")
    return 0


def cmd_train_mcu(cfg, out_dir, force):
    bb_path = cfg.get("backbone", "checkpoint")
    if not bb_path or not os.path.exists(bb_path):
        raise CliError("train-mcu needs [backbone] checkpoint = <existing file>")
    out = _prepare_out(out_dir, force)
    _echo(cfg, out)
    backbone, sched, _ = unet.load_backbone(bb_path)
    bb_digest = checkpoint.digest(backbone.state())
    modalities = [
        s.split(".", 1)[1] for s in sorted(cfg.explicit_sections) if s.startswith("mcu.")
    ]
    if not modalities:
        raise CliError("no [mcu.<modality>] sections in config")
    for mod in modalities:
        ds = _dataset(cfg, "train", modalities=(mod,))
        opt = _train_config(cfg[f"mcu.{mod}"])
        net, losses = guidance.train_mcu(backbone, sched, mod, ds, opt)
        path = out / "checkpoints" / f"mcu_{mod}.mgk"
        guidance.save_mcu(
            path, net.encoder, bb_digest,
            extra_meta={"steps": str(opt.steps),
                        "final_loss": repr(losses[-1] if losses else math.nan)},
        )
        _write_loss_csv(out / f"loss_{mod}.csv", losses)
        print(f"{mod} encoder checkpoint: {path}")
    return 0


def _load_nets(cfg, modalities):
    bb_path = cfg.get("backbone", "checkpoint")
    if not bb_path or not os.path.exists(bb_path):
        raise CliError("missing [backbone] checkpoint")
    backbone, sched, _ = unet.load_backbone(bb_path)
    nets = {}
    for mod in modalities:
        path = cfg.get(f"mcu.{mod}", "checkpoint")
        if not path or not os.path.exists(path):
            raise CliError(f"missing [mcu.{mod}] checkpoint")
        nets[mod], _ = guidance.load_mcu(path, backbone)
    return backbone, sched, nets


def _case_inputs(cfg, scene_seed):
    size = cfg.get("data", "size")
    scene = tw.generate_scene(scene_seed, tw.SceneConfig(size=size))
    mode = cfg.get("complete", "mask_mode")
    if mode == "random":
        mask = tw.random_mask(scene_seed, size)
    else:
        mask = tw.generate_mask(
            tw.MaskSpec(mode, cfg.get("complete", "mask_ratio"), scene_seed), size
        )
    conds = {m: tw.extract_modality(scene, m) for m in cfgmod.MODALITIES}
    return scene, mask, conds


def _sample_batch(mode, backbone, sched, nets, cfg, image, mask, conds, seeds,
                  cmb_cfg=None, modality=None):
    tile = lambda a: np.repeat(a[None], len(seeds), axis=0)
    images, masks = tile(image), tile(mask)
    batch_conds = {m: tile(c) for m, c in conds.items()}
    eta = cfg.get("schedule", "eta")
    if mode == "unguided":
        return cmb.unguided_sample(backbone, images, masks, sched, seeds, eta=eta)
    if mode == "single":
        return cmb.single_modality_sample(
            nets[modality], images, masks, batch_conds[modality], sched, seeds, eta=eta
        )
    if mode == "cmb":
        return cmb.cmb_sample(
            backbone, nets, images, masks, batch_conds, cmb_cfg, sched, seeds, eta_plain=eta
        )
    if mode == "fla":
        return cmb.fla_sample(
            backbone, nets, images, masks, batch_conds,
            cfg.get("complete", "fla_steps"), sched, seeds,
            delta=cmb_cfg.delta if cmb_cfg else None, eta=eta,
        )
    raise CliError(f"unknown completion mode {mode!r}")


def _cmb_config(cfg):
    c = cfg["cmb"]
    return cmb.CMBConfig(
        P=c["p"], Q=c["q"], gamma=c["gamma"], eta=c["eta"],
        delta=cfg.delta_map(), q_mode=c["q_mode"], normalize_grad=c["normalize_grad"],
    )


def _write_trace_csv(path, trace):
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "t_prev", "guided", "loss_before", "loss_after",
                    "grad_norm", "sigma", "warning"])
        for r in trace.steps:
            w.writerow([r.t, r.t_prev, int(r.guided), repr(r.loss_before),
                        repr(r.loss_after), repr(r.grad_norm), repr(r.sigma), r.warning])


def cmd_complete(cfg, out_dir, force, run_seed):
    mode = cfg.get("complete", "mode")
    cmb_cfg = _cmb_config(cfg)
    if mode == "cmb" and not cmb_cfg.delta:
        raise CliError("mode = cmb needs at least one positive [cmb] delta.<modality>")
    modality = cfg.get("complete", "modality")
    if mode == "unguided":
        needed = ()
    elif mode == "single":
        needed = (modality,)
    elif mode == "cmb":
        needed = tuple(sorted(cmb_cfg.delta))
    elif mode == "fla":
        needed = tuple(sorted(cmb_cfg.delta)) or (modality,)
    else:
        raise CliError(f"unknown completion mode {mode!r}")
    backbone, sched, nets = _load_nets(cfg, needed)
    out = _prepare_out(out_dir, force)
    _echo(cfg, out)
    n = cfg.get("complete", "samples_per_input")
    stats = []
    for scene_seed in cfg.get("complete", "scene_seeds"):
        scene, mask, conds = _case_inputs(cfg, scene_seed)
        conds = {m: conds[m] for m in needed} if needed else {}
        seeds = tuple(derive_seed(run_seed, scene_seed, k) for k in range(n))
        outputs, trace = _sample_batch(
            mode, backbone, sched, nets, cfg, scene.image, mask, conds, seeds,
            cmb_cfg=cmb_cfg, modality=modality,
        )
        stem = out / "samples" / f"{scene_seed:06d}"
        imageio.write_pgm(f"{stem}_input.pgm", scene.image)
        imageio.write_pgm(f"{stem}_mask.pgm", mask)
        for m in needed:
            if m == "segmentation":
                ids = np.argmax(conds[m], axis=0) / (tw.NUM_SEG_CLASSES - 1)
                imageio.write_pgm(f"{stem}_guide_{m}.pgm", ids[None])
            else:
                imageio.write_pgm(f"{stem}_guide_{m}.pgm", conds[m])
        for k in range(n):
            imageio.write_pgm(f"{stem}_out_{k}.pgm", np.clip(outputs[k], 0.0, 1.0))
        _write_trace_csv(out / "traces" / f"{scene_seed:06d}.csv", trace)
        region = mask[0] > 0
        if region.any():
            vals = outputs[:, 0][:, region]
            stats.append((scene_seed, float(vals.mean()), float(vals.std())))
    with open(out / "metrics.csv", "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scene_seed", "masked_mean", "masked_std"])
        for row in stats:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    print(f"wrote {len(stats)} completed inputs to {out}")
    return 0


def _get_extractor(cfg):
    path = cfg.get("eval", "extractor_checkpoint")
    if path:
        if not os.path.exists(path):
            raise CliError(f"extractor checkpoint {path} not found")
        net, meta = evalsuite.load_extractor(path)
        return net, float(meta.get("test_accuracy", "nan"))
    train_ds = _dataset(cfg, "train")
    test_ds = _dataset(cfg, "test")
    net, _ = evalsuite.train_extractor(train_ds, steps=cfg.get("eval", "extractor_steps"))
    acc = net.accuracy(test_ds.images, test_ds.class_ids)
    return net, acc


def _evaluate_mode(cfg, mode, backbone, sched, nets, cmb_cfg, scene_seeds, run_seed,
                   extractor, accuracy):
    """Generate one completion per scene (batched) and score the run."""
    outputs, inputs, masks, guidance_sets, refs = [], [], [], [], []
    modality = cfg.get("complete", "modality")
    for start in range(0, len(scene_seeds), EVAL_BATCH):
        chunk = scene_seeds[start : start + EVAL_BATCH]
        imgs, msks, conds_list = [], [], []
        for s in chunk:
            scene, mask, conds = _case_inputs(cfg, s)
            imgs.append(scene.image)
            msks.append(mask)
            conds_list.append(conds)
        images = np.stack(imgs)
        b_masks = np.stack(msks)
        b_conds = {
            m: np.stack([c[m] for c in conds_list]) for m in cfgmod.MODALITIES
        }
        seeds = tuple(derive_seed(run_seed, s, mode) for s in chunk)
        eta = cfg.get("schedule", "eta")
        if mode == "unguided":
            outs, _ = cmb.unguided_sample(backbone, images, b_masks, sched, seeds, eta=eta)
        elif mode == "single":
            outs, _ = cmb.single_modality_sample(
                nets[modality], images, b_masks, b_conds[modality], sched, seeds, eta=eta
            )
        elif mode == "cmb":
            outs, _ = cmb.cmb_sample(
                backbone, nets, images, b_masks, b_conds, cmb_cfg, sched, seeds, eta_plain=eta
            )
        elif mode == "fla":
            outs, _ = cmb.fla_sample(
                backbone, nets, images, b_masks, b_conds,
                cfg.get("complete", "fla_steps"), sched, seeds,
                delta=cmb_cfg.delta, eta=eta,
            )
        else:
            raise CliError(f"unknown mode {mode!r}")
        for i, s in enumerate(chunk):
            outputs.append(outs[i])
            inputs.append(images[i])
            masks.append(b_masks[i])
            guidance_sets.append(conds_list[i])
            refs.append(images[i])
    return evalsuite.evaluate_run(
        np.stack(outputs), np.stack(inputs), np.stack(masks), guidance_sets,
        np.stack(refs), extractor, accuracy, config_digest=cfg.digest(),
    )


def cmd_sweep(cfg, out_dir, force, run_seed):
    out = _prepare_out(out_dir, force)
    _echo(cfg, out)
    axis = cfg.get("sweep", "axis")
    n = cfg.get("sweep", "n_samples")
    scene_seeds = _split_seeds("test", n)
    cmb_cfg = _cmb_config(cfg)
    backbone, sched, nets = _load_nets(cfg, tuple(sorted(cmb_cfg.delta)))
    extractor, accuracy = _get_extractor(cfg)
    rows, labels = [], []
    if axis == "modality_subsets":
        points = [tuple(s.split("+")) for s in cfg.get("sweep", "subsets")]
    else:
        points = list(cfg.get("sweep", "values"))
    for point in points:
        try:
            c = cmb_cfg
            if axis == "P":
                c = cmb.CMBConfig(P=int(point), Q=c.Q, gamma=c.gamma, eta=c.eta,
                                  delta=c.delta, q_mode=c.q_mode,
                                  normalize_grad=c.normalize_grad)
            elif axis == "Q":
                c = cmb.CMBConfig(P=c.P, Q=int(point), gamma=c.gamma, eta=c.eta,
                                  delta=c.delta, q_mode=c.q_mode,
                                  normalize_grad=c.normalize_grad)
            elif axis == "gamma":
                c = cmb.CMBConfig(P=c.P, Q=c.Q, gamma=float(point), eta=c.eta,
                                  delta=c.delta, q_mode=c.q_mode,
                                  normalize_grad=c.normalize_grad)
            elif axis == "modality_subsets":
                sub = {m: cmb_cfg.delta.get(m, 1.0) for m in point}
                c = cmb.CMBConfig(P=c.P, Q=c.Q, gamma=c.gamma, eta=c.eta, delta=sub,
                                  q_mode=c.q_mode, normalize_grad=c.normalize_grad)
            else:
                raise CliError(f"unknown sweep axis {axis!r}")
            rep = _evaluate_mode(
                cfg, "cmb", backbone, sched, nets, c, scene_seeds, run_seed,
                extractor, accuracy,
            )
            rows.append(rep)
            labels.append(str(point))
        except Exception as exc:  # record and continue per spec
            rows.append(evalsuite.MetricReport(
                toy_fid=math.nan, toy_fid_valid=False, edge_f1=math.nan,
                seg_iou=math.nan, depth_mae=math.nan, preservation_exact=False,
                n_samples=0, config_digest=f"error: {exc}",
            ))
            labels.append(str(point))
    evalsuite.write_report_csv(out / "metrics.csv", rows, labels)
    print(f"sweep over {axis}: {len(rows)} grid points -> {out / 'metrics.csv'}")
    return 0


def _read_run_samples(run_dir):
    samples = Path(run_dir) / "samples"
    if not samples.is_dir():
        raise CliError(f"{run_dir} has no samples/ directory")
    cases = {}
    for path in sorted(samples.glob("*_out_*.pgm")):
        stem = path.name.split("_out_")[0]
        cases.setdefault(stem, []).append(path)
    if not cases:
        raise CliError(f"no completed samples under {samples}")
    outputs, inputs, masks = [], [], []
    for stem, outs in sorted(cases.items()):
        inp = imageio.read_pgm(samples / f"{stem}_input.pgm")
        msk = imageio.read_pgm(samples / f"{stem}_mask.pgm")
        for p in outs:
            outputs.append(imageio.read_pgm(p))
            inputs.append(inp)
            masks.append((msk > 0.5).astype(np.float32))
    return np.stack(outputs), np.stack(inputs), np.stack(masks)


def cmd_eval(cfg, out_dir, force):
    run_a = cfg.get("eval", "run_a")
    run_b = cfg.get("eval", "run_b")
    if not run_a:
        raise CliError("eval needs [eval] run_a = <run dir>")
    runs = [("a", run_a)] + ([("b", run_b)] if run_b else [])
    loaded = {label: _read_run_samples(run) for label, run in runs}
    if run_b and len(loaded["a"][0]) != len(loaded["b"][0]):
        raise CliError(
            "paired eval needs equal sample counts, "
            f"got {len(loaded['a'][0])} vs {len(loaded['b'][0])}"
        )
    out = _prepare_out(out_dir, force)
    _echo(cfg, out)
    extractor, accuracy = _get_extractor(cfg)
    ref_ds = _dataset(cfg, "test")
    reports, labels = [], []
    for label, run in runs:
        outputs, inputs, masks = loaded[label]
        guidance_sets = [{} for _ in range(len(outputs))]
        reports.append(evalsuite.evaluate_run(
            outputs, inputs, masks, guidance_sets, ref_ds.images,
            extractor, accuracy, config_digest=cfg.digest(),
        ))
        labels.append(run)
    evalsuite.write_report_csv(out / "metrics.csv", reports, labels)
    if run_b:
        deltas = loaded["a"][0].astype(np.float64) - loaded["b"][0].astype(np.float64)
        per = np.sqrt((deltas ** 2).mean(axis=(1, 2, 3)))
        with open(out / "paired.csv", "w", newline="\n") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample", "rmse_delta"])
            for i, v in enumerate(per):
                w.writerow([i, repr(float(v))])
    print(f"evaluation written to {out / 'metrics.csv'}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="magic", description="guided diffusion image completion toolkit"
    )
    parser.add_argument(
        "command",
        choices=["dataset", "train-backbone", "train-mcu", "complete", "sweep", "eval"],
    )
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        out_dir = args.out or cfg.get("run", "out")
        run_seed = args.seed if args.seed is not None else cfg.get("run", "seed")
        if args.command == "dataset":
            return cmd_dataset(cfg, out_dir, args.force)
        if args.command == "train-backbone":
            return cmd_train_backbone(cfg, out_dir, args.force)
        if args.command == "train-mcu":
            return cmd_train_mcu(cfg, out_dir, args.force)
        if args.command == "complete":
            return cmd_complete(cfg, out_dir, args.force, run_seed)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, args.force, run_seed)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir, args.force)
        raise CliError(f"unknown command {args.command}")
    except (CliError, cfgmod.ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
