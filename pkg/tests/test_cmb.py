import math
import os

import numpy as np
import pytest

from magic import cmb, data, guidance, schedule as sch, unet
from magic.engine import Tape, Tensor
from magic.rngstream import stream

CFG = unet.UNetConfig(image_size=16, base_channels=8, channel_mults=(1, 2), time_embed_dim=16)
SCHED = sch.make_schedule("linear", 100, 1e-4, 0.02, 10)

_CACHE = {}


def dataset():
    if "ds" not in _CACHE:
        _CACHE["ds"] = data.SceneDataset(
            range(16), size=16, modalities=("edge", "segmentation", "depth")
        )
    return _CACHE["ds"]


def backbone():
    if "bb" not in _CACHE:
        opt = unet.TrainConfig(steps=80, batch_size=8, lr=2e-3, seed=0)
        net, _ = unet.train_backbone(CFG, SCHED, dataset(), opt)
        _CACHE["bb"] = net
    return _CACHE["bb"]


def mcu_nets():
    if "mcus" not in _CACHE:
        net = backbone()
        nets = {}
        for i, mod in enumerate(("edge", "segmentation", "depth")):
            opt = unet.TrainConfig(steps=60, batch_size=8, lr=2e-3, seed=10 + i)
            nets[mod], _ = guidance.train_mcu(net, SCHED, mod, dataset(), opt)
        _CACHE["mcus"] = nets
    return _CACHE["mcus"]


def case(n=2):
    ds = dataset()
    batch = ds.batch(np.arange(n))
    return batch.images, batch.masks, dict(batch.conds)


class TestGuidanceLoss:
    def test_identical_features_zero(self):
        base = [Tensor(np.ones((1, 4, 8, 8), dtype=np.float32))]
        loss = cmb.guidance_loss({"edge": [base[0].data.copy()]}, base, {"edge": 1.0})
        assert float(loss.data) == 0.0

    def test_direct_evaluation(self):
        # one modality, one scale, delta=2, squared distance 3 -> 6
        base = [Tensor(np.zeros((1, 1, 1, 3), dtype=np.float32), requires_grad=True)]
        ref = np.array([[[[1.0, 1.0, 1.0]]]], dtype=np.float32)
        loss = cmb.guidance_loss({"edge": [ref]}, base, {"edge": 2.0})
        assert float(loss.data) == pytest.approx(6.0)

    def test_scale_averaging(self):
        # two scales, each squared distance 3, delta 1 -> (3+3)/2 = 3
        base = [
            Tensor(np.zeros((1, 1, 1, 3), dtype=np.float32)),
            Tensor(np.zeros((1, 1, 1, 3), dtype=np.float32)),
        ]
        ref = np.ones((1, 1, 1, 3), dtype=np.float32)
        loss = cmb.guidance_loss({"edge": [ref, ref.copy()]}, base, {"edge": 1.0})
        assert float(loss.data) == pytest.approx(3.0)

    def test_zero_delta_zero_loss_and_grad(self):
        base = [Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32), requires_grad=True)]
        ref = np.ones((1, 1, 2, 2), dtype=np.float32)
        with Tape() as tape:
            loss = cmb.guidance_loss({"edge": [ref]}, base, {"edge": 0.0})
            tape.backward(loss)
        assert float(loss.data) == 0.0
        assert not base[0].grad.any()

    def test_gradient_flows_only_through_base(self):
        base = [Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32), requires_grad=True)]
        ref = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            loss = cmb.guidance_loss({"edge": [ref]}, base, {"edge": 1.0})
            tape.backward(loss)
        assert base[0].grad is not None
        assert ref.grad is None

    def test_shape_mismatch_rejected(self):
        base = [Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))]
        with pytest.raises(ValueError):
            cmb.guidance_loss({"edge": [np.ones((1, 1, 4, 4), np.float32)]}, base, {})

    def test_gradient_matches_finite_differences(self):
        # end-to-end grad of the loss wrt z through a 2-scale micro net, f64
        micro_cfg = unet.UNetConfig(
            image_size=8, base_channels=4, channel_mults=(1, 2),
            time_embed_dim=8, blocks_per_scale=1, norm_groups=2,
        )
        net = unet.build_backbone(micro_cfg, seed=0, dtype=np.float64)
        for p in net.params().values():  # give zero-init layers signal
            if not p.data.any():
                p.data = stream(2, "fill").standard_normal(p.shape) * 0.05
        rng = stream(3, "fd")
        z = rng.standard_normal((1, 1, 8, 8))
        mask = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(np.float64)
        masked = rng.uniform(size=(1, 1, 8, 8)) * (1 - mask)
        with np.errstate(all="ignore"):
            ref_out = net.forward(z, 5, mask, masked)
        guided = {"edge": [f.data + 0.3 for f in ref_out.enc_features]}
        delta = {"edge": 1.0}

        def loss_at(zv):
            out = net.forward(zv, 5, mask, masked)
            return cmb._loss_value(guided, [f.data for f in out.enc_features], delta)

        zt = Tensor(z, requires_grad=True)
        with Tape() as tape:
            out = net.forward(zt, 5, mask, masked)
            loss = cmb.guidance_loss(guided, out.enc_features, delta)
            tape.backward(loss)
        analytic = zt.grad
        idx = [(0, 0, i, j) for i in range(0, 8, 3) for j in range(0, 8, 3)]
        h = 1e-6
        for pos in idx:
            zp, zm = z.copy(), z.copy()
            zp[pos] += h
            zm[pos] -= h
            num = (loss_at(zp) - loss_at(zm)) / (2 * h)
            rel = abs(num - analytic[pos]) / max(abs(num), abs(analytic[pos]), 1e-12)
            assert rel < 1e-3, (pos, num, analytic[pos])


class TestDegeneracies:
    def test_p_zero_equals_unguided_bitwise(self):
        images, masks, conds = case()
        seeds = (100, 101)
        cfg = cmb.CMBConfig(P=0, delta={"edge": 1.0})
        guided_out, _ = cmb.cmb_sample(
            backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, seeds
        )
        plain_out, _ = cmb.unguided_sample(backbone(), images, masks, SCHED, seeds)
        assert np.array_equal(guided_out, plain_out)

    def test_all_deltas_zero_equals_unguided_bitwise(self):
        images, masks, conds = case()
        seeds = (100, 101)
        cfg = cmb.CMBConfig(P=5, delta={"edge": 0.0, "depth": 0.0})
        guided_out, _ = cmb.cmb_sample(
            backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, seeds
        )
        plain_out, _ = cmb.unguided_sample(backbone(), images, masks, SCHED, seeds)
        assert np.array_equal(guided_out, plain_out)

    def test_gamma_zero_equals_unguided_bitwise(self):
        images, masks, conds = case()
        seeds = (100, 101)
        cfg = cmb.CMBConfig(P=5, gamma=0.0, delta={"edge": 1.0})
        guided_out, _ = cmb.cmb_sample(
            backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, seeds
        )
        plain_out, _ = cmb.unguided_sample(backbone(), images, masks, SCHED, seeds)
        assert np.array_equal(guided_out, plain_out)

    def test_zero_encoder_single_modality_equals_unguided(self):
        images, masks, conds = case()
        seeds = (7, 8)
        enc = guidance.GuidanceEncoder(guidance.encoder_config_for("edge", CFG), seed=0)
        net = guidance.MCUNet(backbone=backbone(), encoder=enc)
        guided_out, _ = cmb.single_modality_sample(
            net, images, masks, conds["edge"], SCHED, seeds
        )
        plain_out, _ = cmb.unguided_sample(backbone(), images, masks, SCHED, seeds)
        assert np.array_equal(guided_out, plain_out)

    def test_single_modality_fla_equals_direct_injection(self):
        images, masks, conds = case()
        seeds = (7, 8)
        nets = {"edge": mcu_nets()["edge"]}
        a, _ = cmb.fla_sample(
            backbone(), nets, images, masks, conds, SCHED.t_sample, SCHED, seeds
        )
        b, _ = cmb.single_modality_sample(
            nets["edge"], images, masks, conds["edge"], SCHED, seeds
        )
        assert np.array_equal(a, b)

    def test_fla_zero_modalities_equals_unguided(self):
        images, masks, conds = case()
        seeds = (7, 8)
        a, _ = cmb.fla_sample(backbone(), {}, images, masks, {}, SCHED.t_sample, SCHED, seeds)
        b, _ = cmb.unguided_sample(backbone(), images, masks, SCHED, seeds)
        assert np.array_equal(a, b)


class TestSampling:
    def test_compositing_preserves_known_pixels(self):
        images, masks, conds = case()
        seeds = (1, 2)
        cfg = cmb.CMBConfig(P=3, Q=2, delta={"edge": 1.0, "depth": 1.0})
        out, _ = cmb.cmb_sample(backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, seeds)
        known = masks == 0.0
        assert np.array_equal(out[known], images[known])

    def test_deterministic_given_seed(self):
        images, masks, conds = case()
        cfg = cmb.CMBConfig(P=3, Q=2, delta={"edge": 1.0})
        a, _ = cmb.cmb_sample(backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, (5, 6))
        b, _ = cmb.cmb_sample(backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, (5, 6))
        assert np.array_equal(a, b)

    def test_guided_steps_change_output(self):
        images, masks, conds = case()
        seeds = (1, 2)
        cfg = cmb.CMBConfig(P=5, Q=2, delta={"edge": 1.0})
        guided_out, _ = cmb.cmb_sample(
            backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, seeds
        )
        plain_out, _ = cmb.unguided_sample(backbone(), images, masks, SCHED, seeds)
        assert np.abs(guided_out - plain_out).max() > 0

    def test_trace_complete(self):
        images, masks, conds = case()
        cfg = cmb.CMBConfig(P=4, Q=2, delta={"edge": 1.0})
        _, trace = cmb.cmb_sample(
            backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, (3, 4)
        )
        assert len(trace.steps) == SCHED.t_sample
        guided = trace.guided_records()
        assert len(guided) == 4
        for r in guided:
            assert math.isfinite(r.loss_before) and math.isfinite(r.loss_after)
            assert math.isfinite(r.grad_norm) and r.sigma > 0

    def test_literal_mode_runs(self):
        images, masks, conds = case()
        cfg = cmb.CMBConfig(P=2, Q=2, q_mode="literal", delta={"edge": 1.0})
        out, trace = cmb.cmb_sample(
            backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, (3, 4)
        )
        assert np.all(np.isfinite(out))
        assert len(trace.guided_records()) == 2

    def test_eta_gamma_product_invariance(self):
        # sigma scales linearly in eta, so (2 eta, gamma/2) leaves the
        # guidance update unchanged; isolate it by differencing gamma=0
        images, masks, conds = case(1)
        seeds = (42,)
        t, t_prev = SCHED.step_pairs()[0]
        rng = stream(42, "invariance")
        z = rng.standard_normal(images.shape).astype(np.float32)
        w = {"edge": rng.standard_normal(images.shape).astype(np.float32)}
        masked = unet.masked_image(images, masks)

        def step_diff(eta, gamma):
            out = {}
            for g in (gamma, 0.0):
                cfg = cmb.CMBConfig(P=1, Q=1, gamma=g, eta=eta, delta={"edge": 1.0})
                z_prev, _, _ = cmb.cmb_step(
                    z, dict(w), t, t_prev, backbone(), mcu_nets(), masks, masked,
                    conds, cfg, SCHED, seeds,
                )
                out[g] = z_prev.astype(np.float64)
            return out[gamma] - out[0.0]

        d1 = step_diff(0.3, 0.5)
        d2 = step_diff(0.6, 0.25)
        assert np.abs(d1).max() > 0
        assert np.abs(d1 - d2).max() <= 1e-6 * max(1.0, np.abs(d1).max())

    def test_sigma_zero_warning(self):
        images, masks, conds = case()
        cfg = cmb.CMBConfig(P=2, Q=1, eta=0.0, delta={"edge": 1.0})
        _, trace = cmb.cmb_sample(
            backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, (3, 4)
        )
        assert all(r.warning == "sigma_zero_guidance_inert" for r in trace.guided_records())

    def test_nan_gradient_aborts(self):
        images, masks, conds = case()
        nets = mcu_nets()
        bad_enc = guidance.GuidanceEncoder(guidance.encoder_config_for("edge", CFG), 0)
        bad_enc.load_state(nets["edge"].encoder.state())
        bad_enc.blocks[0][3].weight.data = np.full_like(
            bad_enc.blocks[0][3].weight.data, np.nan
        )
        bad = {"edge": guidance.MCUNet(backbone=backbone(), encoder=bad_enc)}
        cfg = cmb.CMBConfig(P=2, Q=1, delta={"edge": 1.0})
        with pytest.raises(RuntimeError):
            with np.errstate(all="ignore"):
                cmb.cmb_sample(backbone(), bad, images, masks, conds, cfg, SCHED, (3, 4))

    def test_p_too_large_rejected(self):
        images, masks, conds = case()
        cfg = cmb.CMBConfig(P=SCHED.t_sample + 1, delta={"edge": 1.0})
        with pytest.raises(ValueError):
            cmb.cmb_sample(backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, (1, 2))

    def test_missing_condition_rejected(self):
        images, masks, _ = case()
        cfg = cmb.CMBConfig(P=2, delta={"edge": 1.0})
        with pytest.raises(ValueError):
            cmb.cmb_sample(backbone(), mcu_nets(), images, masks, {}, cfg, SCHED, (1, 2))

    def test_thread_count_does_not_change_results(self):
        images, masks, conds = case()
        cfg = cmb.CMBConfig(P=2, Q=2, delta={"edge": 1.0, "segmentation": 1.0, "depth": 1.0})
        old = os.environ.get("MAGIC_THREADS")
        try:
            os.environ["MAGIC_THREADS"] = "1"
            a, _ = cmb.cmb_sample(
                backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, (9, 10)
            )
            os.environ["MAGIC_THREADS"] = "3"
            b, _ = cmb.cmb_sample(
                backbone(), mcu_nets(), images, masks, conds, cfg, SCHED, (9, 10)
            )
        finally:
            if old is None:
                os.environ.pop("MAGIC_THREADS", None)
            else:
                os.environ["MAGIC_THREADS"] = old
        assert np.array_equal(a, b)
