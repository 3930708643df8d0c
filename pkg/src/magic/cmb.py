"""Guided diffusion sampling: gradient-blended multi-modality completion.

Three samplers share one randomness layout so degenerate configurations
(no guided steps, zero step scale, zero modality weights) are bitwise
identical to the unguided chain:

  stream(seed, "z-init")            initial latent
  stream(seed, "w-init", c)         per-modality latent init
  stream(seed, "ddim", t)           the surviving DDIM draw at timestep t
  stream(seed, "ddim-inner", t, q)  discarded inner-iteration draws
  stream(seed, "renoise", t, q)     time-travel renoising
  stream(seed, "w-ddim", c, t[, q]) per-modality latent stepping

Guided steps update the latent by z_{t_prev} = z'_{t_prev} - sigma_t *
gamma * grad_z loss, where the loss pulls the backbone's encoder features
toward each modality's guided features.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import schedule as sch
from .engine import Tape, Tensor, no_grad, ops
from .guidance import encode_guidance, mcu_forward
from .rngstream import stream
from .unet import masked_image


@dataclass(frozen=True)
class CMBConfig:
    P: int = 30  # guided denoising steps, applied at the largest t
    Q: int = 5  # gradient inner iterations per guided step
    gamma: float = 0.5
    eta: float = 1.0  # DDIM eta during guided steps
    delta: dict = field(default_factory=dict)  # modality -> weight
    q_mode: str = "time_travel"  # or "literal"
    normalize_grad: bool = False

    def validate(self, t_sample):
        if not 0 <= self.P <= t_sample:
            raise ValueError(f"P={self.P} outside [0, {t_sample}]")
        if self.Q < 1:
            raise ValueError(f"Q must be >= 1, got {self.Q}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.q_mode not in ("time_travel", "literal"):
            raise ValueError(f"unknown q_mode {self.q_mode!r}")
        if any(v < 0 for v in self.delta.values()):
            raise ValueError("modality weights must be >= 0")

    def active_modalities(self):
        return tuple(sorted(c for c, v in self.delta.items() if v > 0))


@dataclass
class StepRecord:
    t: int
    t_prev: int
    guided: bool
    loss_before: float = math.nan
    loss_after: float = math.nan
    grad_norm: float = math.nan
    sigma: float = math.nan
    warning: str = ""


@dataclass
class SampleTrace:
    seeds: tuple
    steps: list  # one StepRecord per sampled timestep
    final_latent: np.ndarray = None

    def guided_records(self):
        return [r for r in self.steps if r.guided]


class StackedRNG:
    """Draws per-sample noise from independent named streams and stacks it,
    so a sample's randomness depends only on its own seed and tag path."""

    def __init__(self, seeds, *tags):
        self.seeds = seeds
        self.tags = tags

    def standard_normal(self, size):
        if size[0] != len(self.seeds):
            raise ValueError(f"batch {size[0]} != seed count {len(self.seeds)}")
        return np.stack(
            [stream(s, *self.tags).standard_normal(size=size[1:]) for s in self.seeds]
        )


def _threads():
    val = os.environ.get("MAGIC_THREADS", "")
    return int(val) if val else (os.cpu_count() or 1)


def _map_modalities(fn, modalities):
    """Apply fn per modality, in parallel when allowed; deterministic merge."""
    n = _threads()
    if n <= 1 or len(modalities) <= 1:
        return {c: fn(c) for c in modalities}
    with ThreadPoolExecutor(max_workers=min(n, len(modalities))) as pool:
        futs = {c: pool.submit(fn, c) for c in modalities}
        return {c: futs[c].result() for c in modalities}


def guidance_loss(guided, base, delta):
    """Scale-averaged squared feature distance, Tensor scalar.

    guided: modality -> list of per-scale features (constants); base: list
    of per-scale Tensors on the active tape. Gradients flow only through
    base.
    """
    scales = len(base)
    total = None
    for c in sorted(guided):
        feats = guided[c]
        if len(feats) != scales:
            raise ValueError(f"{c}: {len(feats)} scales, base has {scales}")
        w = float(delta.get(c, 1.0))
        for l in range(scales):
            ref = feats[l]
            ref = ref if isinstance(ref, Tensor) else Tensor(np.asarray(ref))
            ref = ref.detach()
            if ref.shape != base[l].shape:
                raise ValueError(
                    f"{c} scale {l}: shape {ref.shape} != base {base[l].shape}"
                )
            term = ops.scale(ops.sum_sq_diff(base[l], ref), w)
            total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("no modalities in guidance loss")
    return ops.scale(total, 1.0 / scales)


def _loss_value(guided, base_arrays, delta):
    """Plain-number evaluation of guidance_loss on detached features."""
    scales = len(base_arrays)
    total = 0.0
    for c, feats in guided.items():
        w = float(delta.get(c, 1.0))
        for l in range(scales):
            ref = feats[l].data if isinstance(feats[l], Tensor) else feats[l]
            d = base_arrays[l] - ref
            total += w * float(np.sum(d.astype(np.float64) ** 2))
    return total / scales


def _backbone_grad(backbone, z, t, mask, masked_img, guided, delta, class_id):
    """One taped backbone forward; returns (eps_pred, enc_features, loss, grad)."""
    zt = Tensor(z, requires_grad=True)
    with Tape() as tape:
        out = backbone.forward(zt, t, mask, masked_img, class_id=class_id)
        loss = guidance_loss(guided, out.enc_features, delta)
        tape.backward(loss)
    grad = zt.grad if zt.grad is not None else np.zeros_like(z)
    return out.eps_pred.data, [f.data for f in out.enc_features], float(loss.data), grad


def _normalize(grad):
    flat = grad.reshape(grad.shape[0], -1)
    norms = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    norms = np.maximum(norms, 1e-12).astype(grad.dtype)
    return grad / norms.reshape(-1, 1, 1, 1)


def cmb_step(z_t, w, t, t_prev, backbone, mcu_nets, mask, masked_img, conds,
             cfg: CMBConfig, sched, seeds, class_id=None):
    """One guided reverse step; returns (z_{t_prev}, w_{t_prev}, StepRecord)."""
    mods = cfg.active_modalities()
    record = StepRecord(t=t, t_prev=t_prev, guided=True)
    record.sigma = sch.sigma_t(sched, t, t_prev, cfg.eta)
    if record.sigma == 0.0 and cfg.gamma > 0:
        record.warning = "sigma_zero_guidance_inert"

    def denoise_w(c, q_tag=None):
        tags = ("w-ddim", c, t) if q_tag is None else ("w-ddim", c, t, q_tag)
        out = mcu_forward(mcu_nets[c], w[c], t, mask, masked_img, conds[c], class_id)
        stepped = sch.ddim_step(
            w[c], out.eps_pred.data, t, t_prev, cfg.eta, StackedRNG(seeds, *tags), sched
        )
        return [f.data for f in out.enc_features], stepped

    if cfg.q_mode == "time_travel":
        with no_grad():
            results = _map_modalities(lambda c: denoise_w(c), mods)
        guided = {c: results[c][0] for c in mods}
        w_prev = {c: results[c][1] for c in mods}
        z_cur = z_t
        z_prev = None
        final_probe = None
        for q in range(cfg.Q):
            eps, _, loss, grad = _backbone_grad(
                backbone, z_cur, t, mask, masked_img, guided, cfg.delta, class_id
            )
            if not np.all(np.isfinite(grad)):
                raise RuntimeError(f"non-finite guidance gradient at t={t}, q={q}")
            if q == 0:
                record.loss_before = loss
            gnorm = float(np.sqrt((grad.astype(np.float64) ** 2).sum()))
            record.grad_norm = gnorm
            if cfg.normalize_grad:
                grad = _normalize(grad)
            last = q == cfg.Q - 1
            tags = ("ddim", t) if last else ("ddim-inner", t, q)
            z_ddim = sch.ddim_step(z_cur, eps, t, t_prev, cfg.eta, StackedRNG(seeds, *tags), sched)
            update = (record.sigma * cfg.gamma * grad).astype(z_ddim.dtype)
            z_prev = z_ddim - update
            if last:
                final_probe = (z_cur - update).astype(z_cur.dtype)
            else:
                z_cur = sch.renoise(z_prev, t, t_prev, StackedRNG(seeds, "renoise", t, q), sched)
    else:  # literal: re-execute the whole step Q times from the same state
        z_prev = None
        w_prev = None
        final_probe = None
        for q in range(cfg.Q):
            last = q == cfg.Q - 1
            q_tag = None if last else q
            with no_grad():
                results = _map_modalities(lambda c: denoise_w(c, q_tag), mods)
            guided = {c: results[c][0] for c in mods}
            w_prev = {c: results[c][1] for c in mods}
            eps, _, loss, grad = _backbone_grad(
                backbone, z_t, t, mask, masked_img, guided, cfg.delta, class_id
            )
            if not np.all(np.isfinite(grad)):
                raise RuntimeError(f"non-finite guidance gradient at t={t}, q={q}")
            if q == 0:
                record.loss_before = loss
            record.grad_norm = float(np.sqrt((grad.astype(np.float64) ** 2).sum()))
            if cfg.normalize_grad:
                grad = _normalize(grad)
            tags = ("ddim", t) if last else ("ddim-inner", t, q)
            z_ddim = sch.ddim_step(z_t, eps, t, t_prev, cfg.eta, StackedRNG(seeds, *tags), sched)
            update = (record.sigma * cfg.gamma * grad).astype(z_ddim.dtype)
            z_prev = z_ddim - update
            if last:
                final_probe = (z_t - update).astype(z_t.dtype)

    # renoise-free probe: re-evaluate the loss at level t after the update
    with no_grad():
        out = backbone.forward(final_probe, t, mask, masked_img, class_id=class_id)
    record.loss_after = _loss_value(guided, [f.data for f in out.enc_features], cfg.delta)
    return z_prev, w_prev, record


def _plain_step(z_t, eps_pred, t, t_prev, eta, sched, seeds):
    return sch.ddim_step(z_t, eps_pred, t, t_prev, eta, StackedRNG(seeds, "ddim", t), sched)


def _composite(z0, image, mask):
    return (image * (1.0 - mask) + z0 * mask).astype(image.dtype)


def _init_latents(seeds, shape):
    return np.stack(
        [stream(s, "z-init").standard_normal(size=shape[1:]) for s in seeds]
    ).astype(np.float32)


def unguided_sample(backbone, image, mask, sched, seeds, eta=0.0, class_id=None):
    """Plain masked DDIM chain; the baseline every guided path degenerates to."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    seeds = tuple(seeds)
    masked = masked_image(image, mask)
    z = _init_latents(seeds, image.shape)
    trace = SampleTrace(seeds=seeds, steps=[])
    for t, t_prev in sched.step_pairs():
        with no_grad():
            out = backbone.forward(z, t, mask, masked, class_id=class_id)
        z = _plain_step(z, out.eps_pred.data, t, t_prev, eta, sched, seeds)
        trace.steps.append(
            StepRecord(t=t, t_prev=t_prev, guided=False, sigma=sch.sigma_t(sched, t, t_prev, eta))
        )
    trace.final_latent = z
    return _composite(z, image, mask), trace


def cmb_sample(backbone, mcu_nets, image, mask, conds, cfg: CMBConfig, sched, seeds,
               eta_plain=0.0, class_id=None):
    """Blended multi-modality completion: guided for the first P steps
    (largest t), plain DDIM afterwards."""
    cfg.validate(sched.t_sample)
    mods = cfg.active_modalities()
    for c in mods:
        if c not in mcu_nets:
            raise ValueError(f"no loaded guidance net for modality {c!r}")
        if c not in conds:
            raise ValueError(f"missing condition map for modality {c!r}")
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    seeds = tuple(seeds)
    masked = masked_image(image, mask)
    degenerate = cfg.P == 0 or cfg.gamma == 0 or not mods
    z = _init_latents(seeds, image.shape)
    w = {
        c: np.stack(
            [stream(s, "w-init", c).standard_normal(size=image.shape[1:]) for s in seeds]
        ).astype(np.float32)
        for c in mods
    }
    trace = SampleTrace(seeds=seeds, steps=[])
    for i, (t, t_prev) in enumerate(sched.step_pairs()):
        if degenerate or i >= cfg.P:
            with no_grad():
                out = backbone.forward(z, t, mask, masked, class_id=class_id)
            z = _plain_step(z, out.eps_pred.data, t, t_prev, eta_plain, sched, seeds)
            trace.steps.append(
                StepRecord(t=t, t_prev=t_prev, guided=False,
                           sigma=sch.sigma_t(sched, t, t_prev, eta_plain))
            )
        else:
            z, w, record = cmb_step(
                z, w, t, t_prev, backbone, mcu_nets, mask, masked, conds,
                cfg, sched, seeds, class_id,
            )
            trace.steps.append(record)
    trace.final_latent = z
    return _composite(z, image, mask), trace


def fla_sample(backbone, mcu_nets, image, mask, conds, fla_steps, sched, seeds,
               delta=None, eta=0.0, class_id=None):
    """Feature-level addition baseline: all modality features are summed
    into the backbone encoder for the first fla_steps steps."""
    if not 0 <= fla_steps <= sched.t_sample:
        raise ValueError(f"fla_steps={fla_steps} outside [0, {sched.t_sample}]")
    delta = delta or {}
    mods = tuple(sorted(delta)) if delta else tuple(sorted(mcu_nets))
    for c in mods:
        if c not in mcu_nets:
            raise ValueError(f"no loaded encoder for modality {c!r}")
        if c not in conds:
            raise ValueError(f"missing condition map for modality {c!r}")
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    seeds = tuple(seeds)
    masked = masked_image(image, mask)
    z = _init_latents(seeds, image.shape)
    trace = SampleTrace(seeds=seeds, steps=[])
    feats = None
    for i, (t, t_prev) in enumerate(sched.step_pairs()):
        with no_grad():
            if i < fla_steps and mods:
                if feats is None:  # conditions are static within a chain
                    per_mod = _map_modalities(
                        lambda c: [
                            f.data * np.float32(delta.get(c, 1.0))
                            for f in encode_guidance(mcu_nets[c].encoder, conds[c])
                        ],
                        mods,
                    )
                    feats = [
                        Tensor(np.sum([per_mod[c][l] for c in mods], axis=0))
                        for l in range(len(per_mod[mods[0]]))
                    ]
                out = backbone.forward(z, t, mask, masked, class_id=class_id, inject=feats)
            else:
                out = backbone.forward(z, t, mask, masked, class_id=class_id)
        z = _plain_step(z, out.eps_pred.data, t, t_prev, eta, sched, seeds)
        trace.steps.append(
            StepRecord(t=t, t_prev=t_prev, guided=i < fla_steps and bool(mods),
                       sigma=sch.sigma_t(sched, t, t_prev, eta))
        )
    trace.final_latent = z
    return _composite(z, image, mask), trace


def single_modality_sample(mcu_net, image, mask, cond, sched, seeds, eta=0.0, class_id=None):
    """Plain DDIM chain through one guided denoiser."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    seeds = tuple(seeds)
    masked = masked_image(image, mask)
    z = _init_latents(seeds, image.shape)
    trace = SampleTrace(seeds=seeds, steps=[])
    with no_grad():
        feats = [f for f in encode_guidance(mcu_net.encoder, cond)]
    for t, t_prev in sched.step_pairs():
        with no_grad():
            out = mcu_net.backbone.forward(
                z, t, mask, masked, class_id=class_id, inject=feats
            )
        z = _plain_step(z, out.eps_pred.data, t, t_prev, eta, sched, seeds)
        trace.steps.append(
            StepRecord(t=t, t_prev=t_prev, guided=True, sigma=sch.sigma_t(sched, t, t_prev, eta))
        )
    trace.final_latent = z
    return _composite(z, image, mask), trace
