"""Shared trained artifacts for the acceptance suite.

Training the acceptance-scale backbone, four guidance encoders, and the
metric feature extractor takes about an hour on one CPU core, so every
artifact is cached under pretrained/ and loaded on later runs. Run this
module directly to warm the cache ahead of pytest:

    python3 tests/artifacts.py
"""

import sys
from pathlib import Path

from magic import checkpoint, data, evalsuite, guidance, unet
from magic import schedule as sch
from magic import toyworld as tw

# acceptance scale: small enough to train on one core, large enough for
# guidance effects to be measurable
SIZE = 16
TRAIN_LIMIT = 2000
TEST_LIMIT = 500
BACKBONE_STEPS = 6000
MCU_STEPS = 4000
EXTRACTOR_STEPS = 3000
LR = 1e-3
BATCH = 32
MODALITIES = ("edge", "sketch", "segmentation", "depth")

PRETRAINED = Path(__file__).resolve().parent.parent / "pretrained"

BACKBONE_CFG = unet.UNetConfig(
    image_size=SIZE, base_channels=16, channel_mults=(1, 2), time_embed_dim=64
)


def make_sched(t_sample=50):
    return sch.make_schedule("linear", 1000, 1e-4, 0.02, t_sample)


def train_dataset(modalities=()):
    seeds = list(tw.split_seeds("train"))[:TRAIN_LIMIT]
    return data.SceneDataset(seeds, size=SIZE, modalities=modalities)


def test_dataset(limit=TEST_LIMIT):
    seeds = list(tw.split_seeds("test"))[:limit]
    return data.SceneDataset(seeds, size=SIZE)


def get_backbone():
    path = PRETRAINED / "backbone.mgk"
    sched = make_sched()
    if path.exists():
        net, _, meta = unet.load_backbone(path)
        if net.cfg == BACKBONE_CFG and meta.get("steps") == str(BACKBONE_STEPS):
            return net, sched
        raise RuntimeError(f"stale cache {path}; delete pretrained/ and retrain")
    opt = unet.TrainConfig(steps=BACKBONE_STEPS, batch_size=BATCH, lr=LR, seed=0)
    net, losses = unet.train_backbone(BACKBONE_CFG, sched, train_dataset(), opt)
    PRETRAINED.mkdir(exist_ok=True)
    unet.save_backbone(
        path, net, sched, opt,
        extra_meta={"steps": str(BACKBONE_STEPS), "final_loss": repr(losses[-1])},
    )
    return net, sched


def get_mcu(backbone, sched, modality):
    path = PRETRAINED / f"mcu_{modality}.mgk"
    if path.exists():
        net, _ = guidance.load_mcu(path, backbone)
        return net
    opt = unet.TrainConfig(steps=MCU_STEPS, batch_size=BATCH, lr=LR, seed=1)
    net, losses = guidance.train_mcu(backbone, sched, modality, train_dataset((modality,)), opt)
    PRETRAINED.mkdir(exist_ok=True)
    guidance.save_mcu(
        path, net.encoder, checkpoint.digest(backbone.state()),
        extra_meta={"steps": str(MCU_STEPS), "final_loss": repr(losses[-1])},
    )
    return net


def get_extractor():
    path = PRETRAINED / "extractor.mgk"
    if path.exists():
        net, meta = evalsuite.load_extractor(path)
        return net, float(meta["test_accuracy"])
    # full train split: the metric net is cheap and benefits from diversity
    full = data.SceneDataset(list(tw.split_seeds("train")), size=SIZE)
    net, _ = evalsuite.train_extractor(full, steps=EXTRACTOR_STEPS)
    ds = test_dataset()
    acc = net.accuracy(ds.images, ds.class_ids)
    PRETRAINED.mkdir(exist_ok=True)
    evalsuite.save_extractor(path, net, acc)
    return net, acc


def build_all():
    backbone, sched = get_backbone()
    print("backbone ready", flush=True)
    for m in MODALITIES:
        get_mcu(backbone, sched, m)
        print(f"mcu {m} ready", flush=True)
    _, acc = get_extractor()
    print(f"extractor ready (test accuracy {acc:.3f})", flush=True)


if __name__ == "__main__":
    sys.exit(build_all())
