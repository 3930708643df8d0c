"""Masked-image-conditioned U-Net denoiser and its trainer.

The network consumes (noisy latent, timestep, mask, masked image)
concatenated along channels, predicts the noise, and exposes the output
feature map of every encoder scale so guidance signals can be injected
and compared scale-for-scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint, schedule as sch
from .engine import Tape, Tensor, ops
from .engine.optim import Adam
from .engine.tensor import register
from .rngstream import stream


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    latent_channels: int = 1
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    blocks_per_scale: int = 2
    time_embed_dim: int = 128
    cond_embed_classes: int = 0
    norm_groups: int = 8

    @property
    def levels(self) -> int:
        """Number of downsamplings L; feature scales are 0..L."""
        return len(self.channel_mults) - 1

    @property
    def in_channels(self) -> int:
        # latent + mask + masked image
        return 2 * self.latent_channels + 1

    def validate(self):
        if self.image_size % (2**self.levels):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.levels}"
            )
        for mult in self.channel_mults:
            ch = self.base_channels * mult
            if ch % self._groups_for(ch):
                raise ValueError(f"{ch} channels not divisible by norm groups")

    def _groups_for(self, channels):
        return self.norm_groups if channels >= self.norm_groups else channels


@dataclass
class DenoiserOutput:
    eps_pred: Tensor
    enc_features: list  # per-scale feature maps, scale l has extent size/2^l


def _uniform_fan_in(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, rng, cin, cout, k=3, stride=1, zero_init=False, dtype=np.float32):
        self.stride = stride
        self.padding = k // 2
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = _uniform_fan_in(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self, prefix, out):
        out[f"{prefix}.weight"] = self.weight
        out[f"{prefix}.bias"] = self.bias


class Linear:
    def __init__(self, rng, n_in, n_out, dtype=np.float32):
        self.weight = Tensor(_uniform_fan_in(rng, (n_out, n_in), n_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)

    def params(self, prefix, out):
        out[f"{prefix}.weight"] = self.weight
        out[f"{prefix}.bias"] = self.bias


class GroupNorm:
    def __init__(self, channels, groups, dtype=np.float32):
        self.groups = groups
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ops.normalize_channels(x, self.gain, self.bias, self.groups)

    def params(self, prefix, out):
        out[f"{prefix}.gain"] = self.gain
        out[f"{prefix}.bias"] = self.bias


class ResBlock:
    """Two 3x3 convolutions with group norm, SiLU, and a timestep shift."""

    def __init__(self, rng, cin, cout, temb_dim, groups_fn, dtype=np.float32):
        self.norm1 = GroupNorm(cin, groups_fn(cin), dtype)
        self.conv1 = Conv2d(rng, cin, cout, dtype=dtype)
        self.temb_proj = Linear(rng, temb_dim, cout, dtype) if temb_dim else None
        self.norm2 = GroupNorm(cout, groups_fn(cout), dtype)
        self.conv2 = Conv2d(rng, cout, cout, dtype=dtype)
        self.shortcut = Conv2d(rng, cin, cout, k=1, dtype=dtype) if cin != cout else None

    def __call__(self, x, temb=None):
        h = self.conv1(ops.silu(self.norm1(x)))
        if self.temb_proj is not None and temb is not None:
            shift = self.temb_proj(ops.silu(temb))
            h = _add_spatial_broadcast(h, shift)
        skip = x if self.shortcut is None else self.shortcut(x)
        h = self.conv2(ops.silu(self.norm2(h)))
        return ops.add(h, skip)

    def params(self, prefix, out):
        self.norm1.params(f"{prefix}.norm1", out)
        self.conv1.params(f"{prefix}.conv1", out)
        if self.temb_proj is not None:
            self.temb_proj.params(f"{prefix}.temb", out)
        self.norm2.params(f"{prefix}.norm2", out)
        self.conv2.params(f"{prefix}.conv2", out)
        if self.shortcut is not None:
            self.shortcut.params(f"{prefix}.shortcut", out)


def _add_spatial_broadcast(h, shift):
    """h[B,C,H,W] + shift[B,C] with gradient to both."""
    out = h.data + shift.data[:, :, None, None]

    def backward(g):
        return g, g.sum(axis=(2, 3))

    return register(out, (h, shift), backward)


def sinusoidal_embedding(t, dim, dtype=np.float32):
    """Standard sin/cos positional features of integer timesteps t[B]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return Tensor(emb.astype(dtype))


class Denoiser:
    """Residual U-Net with per-scale encoder feature capture/injection."""

    def __init__(self, cfg: UNetConfig, seed: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        rng = stream(seed, "unet-init")
        g = cfg._groups_for
        d = cfg.time_embed_dim
        self.time_mlp1 = Linear(rng, d, d, dtype)
        self.time_mlp2 = Linear(rng, d, d, dtype)
        if cfg.cond_embed_classes > 0:
            self.class_table = Tensor(
                _uniform_fan_in(rng, (cfg.cond_embed_classes, d), d, dtype),
                requires_grad=True,
            )
        else:
            self.class_table = None
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        self.stem = Conv2d(rng, cfg.in_channels, chans[0], dtype=dtype)
        self.enc_blocks = []
        self.downs = []
        prev = chans[0]
        for l, ch in enumerate(chans):
            blocks = []
            for _ in range(cfg.blocks_per_scale):
                blocks.append(ResBlock(rng, prev, ch, d, g, dtype))
                prev = ch
            self.enc_blocks.append(blocks)
            if l < cfg.levels:
                self.downs.append(Conv2d(rng, ch, ch, dtype=dtype))
        self.ups = []
        self.dec_blocks = []
        for l in range(cfg.levels - 1, -1, -1):
            self.ups.append(Conv2d(rng, prev, chans[l], dtype=dtype))
            blocks = [ResBlock(rng, 2 * chans[l], chans[l], d, g, dtype)]
            for _ in range(cfg.blocks_per_scale - 1):
                blocks.append(ResBlock(rng, chans[l], chans[l], d, g, dtype))
            self.dec_blocks.append(blocks)
            prev = chans[l]
        self.out_norm = GroupNorm(chans[0], g(chans[0]), dtype)
        self.out_conv = Conv2d(rng, chans[0], cfg.latent_channels, zero_init=True, dtype=dtype)

    def params(self):
        out = {}
        self.time_mlp1.params("time.mlp1", out)
        self.time_mlp2.params("time.mlp2", out)
        if self.class_table is not None:
            out["class.table"] = self.class_table
        self.stem.params("stem", out)
        for l, blocks in enumerate(self.enc_blocks):
            for i, blk in enumerate(blocks):
                blk.params(f"enc.{l}.{i}", out)
        for l, down in enumerate(self.downs):
            down.params(f"down.{l}", out)
        for i, up in enumerate(self.ups):
            up.params(f"up.{i}", out)
        for i, blocks in enumerate(self.dec_blocks):
            for j, blk in enumerate(blocks):
                blk.params(f"dec.{i}.{j}", out)
        self.out_norm.params("out.norm", out)
        self.out_conv.params("out.conv", out)
        return out

    def state(self):
        return {name: p.data for name, p in self.params().items()}

    def load_state(self, arrays):
        params = self.params()
        if set(arrays) != set(params):
            missing = set(params) ^ set(arrays)
            raise ValueError(f"parameter names disagree: {sorted(missing)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = np.array(arrays[name], dtype=self.dtype, copy=True)

    def set_trainable(self, flag):
        for p in self.params().values():
            p.requires_grad = flag

    def time_embedding(self, t, batch, class_id=None):
        t = np.asarray(t)
        if t.ndim == 0:
            t = np.full(batch, int(t))
        emb = sinusoidal_embedding(t, self.cfg.time_embed_dim, self.dtype)
        temb = self.time_mlp2(ops.silu(self.time_mlp1(emb)))
        if self.class_table is not None and class_id is not None:
            ids = np.asarray(class_id)
            if ids.ndim == 0:
                ids = np.full(batch, int(ids))
            temb = ops.add(temb, ops.embedding(self.class_table, ids))
        return temb

    def forward(self, z_t, t, mask_ds, masked_img_lat, class_id=None, inject=None):
        """Predict noise; returns eps and the (optionally injected) encoder features.

        inject, when given, is one additive feature map per scale, applied
        at the encoder-scale output before the skip connection branches.
        """
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=self.dtype))
        mask_ds = mask_ds if isinstance(mask_ds, Tensor) else Tensor(np.asarray(mask_ds, dtype=self.dtype))
        masked = (
            masked_img_lat
            if isinstance(masked_img_lat, Tensor)
            else Tensor(np.asarray(masked_img_lat, dtype=self.dtype))
        )
        vals = np.unique(mask_ds.data)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError("mask values must be binary")
        if z_t.shape[2:] != mask_ds.shape[2:] or z_t.shape[2:] != masked.shape[2:]:
            raise ValueError(
                f"spatial extents disagree: z {z_t.shape}, mask {mask_ds.shape}, masked {masked.shape}"
            )
        if inject is not None and len(inject) != self.cfg.levels + 1:
            raise ValueError(
                f"expected {self.cfg.levels + 1} injected scales, got {len(inject)}"
            )
        b = z_t.shape[0]
        temb = self.time_embedding(t, b, class_id)
        h = self.stem(ops.concat_channels([z_t, mask_ds, masked]))
        enc_features = []
        skips = []
        for l, blocks in enumerate(self.enc_blocks):
            for blk in blocks:
                h = blk(h, temb)
            if inject is not None:
                h = ops.add(h, inject[l])
            enc_features.append(h)
            skips.append(h)
            if l < self.cfg.levels:
                h = self.downs[l](ops.resample(h, "down"))
        for i, blocks in enumerate(self.dec_blocks):
            l = self.cfg.levels - 1 - i
            h = self.ups[i](ops.resample(h, "up"))
            h = ops.concat_channels([h, skips[l]])
            for blk in blocks:
                h = blk(h, temb)
        eps = self.out_conv(ops.silu(self.out_norm(h)))
        return DenoiserOutput(eps_pred=eps, enc_features=enc_features)


def build_backbone(cfg: UNetConfig, seed: int, dtype=np.float32) -> Denoiser:
    return Denoiser(cfg, seed, dtype)


def denoise(net: Denoiser, z_t, t, mask_ds, masked_img_lat, class_id=None) -> DenoiserOutput:
    from .engine import no_grad

    with no_grad():
        return net.forward(z_t, t, mask_ds, masked_img_lat, class_id)


@dataclass
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 32
    lr: float = 2e-4
    seed: int = 0
    log_every: int = 1


def masked_image(image, mask):
    """Known-region conditioning: pixels kept where mask == 0."""
    return image * (1.0 - mask)


def training_loss(net, sched, images, masks, rng, class_ids=None):
    """One evaluation of the noise-prediction objective on a batch."""
    b = images.shape[0]
    t = rng.integers(1, sched.t_train + 1, size=b)
    eps = rng.standard_normal(size=images.shape).astype(net.dtype)
    z_t = sch.forward_noise_batch(images, t, eps, sched)
    out = net.forward(z_t, t, masks, masked_image(images, masks), class_id=class_ids)
    return ops.mse(out.eps_pred, Tensor(eps))


def train_backbone(cfg, sched, dataset, opt_cfg: TrainConfig, fixed_batch=False):
    """Minimize the masked noise-prediction objective; returns (net, losses).

    With fixed_batch the first sampled batch is reused every step
    (single-batch overfit probe).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    net = build_backbone(cfg, opt_cfg.seed)
    losses = train_net(
        net, net.params(), sched, dataset, opt_cfg, fixed_batch=fixed_batch
    )
    return net, losses


def train_net(net, trainable, sched, dataset, opt_cfg, fixed_batch=False,
              forward_loss=None, step_offset=0):
    """Shared training loop: Adam on `trainable` through `forward_loss`.

    forward_loss(batch, rng) defaults to the plain backbone objective.
    step_offset shifts the per-step randomness so resumed runs do not
    replay the batches already consumed.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    opt = Adam(trainable.values(), lr=opt_cfg.lr)
    losses = []
    batch = None
    for raw_step in range(opt_cfg.steps):
        step = raw_step + step_offset
        order_rng = stream(opt_cfg.seed, "order", 0 if fixed_batch else step)
        noise_rng = stream(opt_cfg.seed, "noise", step)
        if batch is None or not fixed_batch:
            idx = order_rng.integers(0, len(dataset), size=opt_cfg.batch_size)
            batch = dataset.batch(idx)
        with Tape() as tape:
            if forward_loss is None:
                loss = training_loss(net, sched, batch[0], batch[1], noise_rng, batch[2])
            else:
                loss = forward_loss(batch, noise_rng)
            opt.zero_grad()
            tape.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    return losses


def save_backbone(path, net, sched, opt_cfg=None, extra_meta=None):
    meta = {
        "kind": "backbone",
        "config": json.dumps(asdict(net.cfg)),
        "schedule": json.dumps(
            {
                "kind": "linear",
                "t_train": sched.t_train,
                "beta_start": float(sched.betas[0]),
                "beta_end": float(sched.betas[-1]),
                "t_sample": sched.t_sample,
            }
        ),
        "seed": str(net.seed),
    }
    if opt_cfg is not None:
        meta["train"] = json.dumps(asdict(opt_cfg))
    if extra_meta:
        meta.update(extra_meta)
    checkpoint.save(path, net.state(), meta)


def load_backbone(path):
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone checkpoint")
    cfg_dict = json.loads(meta["config"])
    cfg_dict["channel_mults"] = tuple(cfg_dict["channel_mults"])
    cfg = UNetConfig(**cfg_dict)
    net = build_backbone(cfg, int(meta.get("seed", "0")))
    net.load_state(arrays)
    s = json.loads(meta["schedule"])
    sched = sch.make_schedule(
        s["kind"], s["t_train"], s["beta_start"], s["beta_end"], s["t_sample"]
    )
    return net, sched, meta
