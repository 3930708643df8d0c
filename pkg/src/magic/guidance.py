"""Per-modality guidance encoders riding a frozen backbone denoiser.

A GuidanceEncoder maps a modality map (edge, sketch, segmentation, depth)
to one additive feature per backbone encoder scale. Its per-scale output
projections are zero-initialized, so an untrained encoder leaves the
backbone bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint, schedule as sch, toyworld, unet
from .engine import no_grad, ops
from .rngstream import stream


@dataclass(frozen=True)
class GuidanceEncoderConfig:
    modality: str
    in_channels: int
    block_channels: tuple  # backbone per-scale channel counts, scales 0..L
    norm_groups: int = 8

    def validate(self):
        if self.modality not in ("edge", "sketch", "segmentation", "depth"):
            raise ValueError(f"no guidance encoder for modality {self.modality!r}")
        if self.in_channels != toyworld.modality_channels(self.modality):
            raise ValueError(
                f"{self.modality} expects {toyworld.modality_channels(self.modality)} "
                f"channels, config says {self.in_channels}"
            )

    def _groups_for(self, channels):
        return self.norm_groups if channels >= self.norm_groups else channels


def encoder_config_for(modality, backbone_cfg: unet.UNetConfig) -> GuidanceEncoderConfig:
    chans = tuple(backbone_cfg.base_channels * m for m in backbone_cfg.channel_mults)
    return GuidanceEncoderConfig(
        modality=modality,
        in_channels=toyworld.modality_channels(modality),
        block_channels=chans,
        norm_groups=backbone_cfg.norm_groups,
    )


class GuidanceEncoder:
    """One feature-extraction block per scale: a convolution, two residual
    blocks, and a zero-initialized projection; downsampling between scales."""

    def __init__(self, cfg: GuidanceEncoderConfig, seed: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        rng = stream(seed, "guidance-init", cfg.modality)
        g = cfg._groups_for
        self.blocks = []
        prev = cfg.in_channels
        for ch in cfg.block_channels:
            conv_in = unet.Conv2d(rng, prev, ch, dtype=dtype)
            rb1 = unet.ResBlock(rng, ch, ch, 0, g, dtype)
            rb2 = unet.ResBlock(rng, ch, ch, 0, g, dtype)
            proj = unet.Conv2d(rng, ch, ch, zero_init=True, dtype=dtype)
            self.blocks.append((conv_in, rb1, rb2, proj))
            prev = ch

    def params(self):
        out = {}
        for l, (conv_in, rb1, rb2, proj) in enumerate(self.blocks):
            conv_in.params(f"block.{l}.conv", out)
            rb1.params(f"block.{l}.res1", out)
            rb2.params(f"block.{l}.res2", out)
            proj.params(f"block.{l}.proj", out)
        return out

    def state(self):
        return {name: p.data for name, p in self.params().items()}

    def load_state(self, arrays):
        params = self.params()
        if set(arrays) != set(params):
            raise ValueError("parameter names disagree with encoder architecture")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = np.array(arrays[name], dtype=self.dtype, copy=True)

    def set_trainable(self, flag):
        for p in self.params().values():
            p.requires_grad = flag


def encode_guidance(enc: GuidanceEncoder, cond):
    """Multi-scale guidance features F_c^l, one per backbone scale."""
    cond = cond if isinstance(cond, unet.Tensor) else unet.Tensor(np.asarray(cond, dtype=enc.dtype))
    if cond.shape[1] != enc.cfg.in_channels:
        raise ValueError(
            f"condition has {cond.shape[1]} channels, expected {enc.cfg.in_channels}"
        )
    feats = []
    h = cond
    for l, (conv_in, rb1, rb2, proj) in enumerate(enc.blocks):
        if l > 0:
            h = ops.resample(h, "down")
        h = rb2(rb1(conv_in(h)))
        feats.append(proj(h))
    return feats


@dataclass
class MCUNet:
    backbone: unet.Denoiser
    encoder: GuidanceEncoder

    def __post_init__(self):
        chans = tuple(
            self.backbone.cfg.base_channels * m for m in self.backbone.cfg.channel_mults
        )
        if self.encoder.cfg.block_channels != chans:
            raise ValueError(
                f"encoder scales {self.encoder.cfg.block_channels} do not match "
                f"backbone scales {chans}"
            )


def mcu_forward(m: MCUNet, w_t, t, mask_ds, masked_img_lat, cond, class_id=None):
    """Guided forward (grad-enabled); guidance features are injected
    additively at every encoder scale."""
    feats = encode_guidance(m.encoder, cond)
    return m.backbone.forward(
        w_t, t, mask_ds, masked_img_lat, class_id=class_id, inject=feats
    )


def mcu_denoise(m: MCUNet, w_t, t, mask_ds, masked_img_lat, cond, class_id=None):
    with no_grad():
        return mcu_forward(m, w_t, t, mask_ds, masked_img_lat, cond, class_id)


def train_mcu(backbone: unet.Denoiser, sched, modality, dataset, opt_cfg: unet.TrainConfig,
              fixed_batch=False):
    """Train an encoder for one modality against a frozen backbone.

    Returns (mcu_net, losses). Backbone parameters are restored to their
    trainability flags afterwards but are never updated (they are excluded
    from the optimizer and detached from the tape).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    enc = GuidanceEncoder(encoder_config_for(modality, backbone.cfg), opt_cfg.seed)
    net = MCUNet(backbone=backbone, encoder=enc)
    backbone.set_trainable(False)
    enc.set_trainable(True)

    def forward_loss(batch, rng):
        images, masks = batch.images, batch.masks
        b = images.shape[0]
        t = rng.integers(1, sched.t_train + 1, size=b)
        eps = rng.standard_normal(size=images.shape).astype(backbone.dtype)
        z_t = sch.forward_noise_batch(images, t, eps, sched)
        out = mcu_forward(
            net, z_t, t, masks, unet.masked_image(images, masks),
            batch.conds[modality], class_id=batch.class_ids,
        )
        return ops.mse(out.eps_pred, unet.Tensor(eps))

    losses = unet.train_net(
        net, enc.params(), sched, dataset, opt_cfg,
        fixed_batch=fixed_batch, forward_loss=forward_loss,
    )
    return net, losses


def save_mcu(path, enc: GuidanceEncoder, backbone_digest, extra_meta=None):
    meta = {
        "kind": "mcu",
        "modality": enc.cfg.modality,
        "config": json.dumps(asdict(enc.cfg)),
        "seed": str(enc.seed),
        "backbone_digest": backbone_digest,
    }
    if extra_meta:
        meta.update(extra_meta)
    checkpoint.save(path, enc.state(), meta)


def load_mcu(path, backbone: unet.Denoiser):
    """Load an encoder checkpoint and bind it to the backbone it was
    trained against (content digest validated)."""
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "mcu":
        raise ValueError(f"{path} is not a guidance encoder checkpoint")
    if meta["backbone_digest"] != checkpoint.digest(backbone.state()):
        raise ValueError(
            f"{path} was trained against a different backbone (digest mismatch)"
        )
    cfg_dict = json.loads(meta["config"])
    cfg_dict["block_channels"] = tuple(cfg_dict["block_channels"])
    enc = GuidanceEncoder(GuidanceEncoderConfig(**cfg_dict), int(meta.get("seed", "0")))
    enc.load_state(arrays)
    return MCUNet(backbone=backbone, encoder=enc), meta
