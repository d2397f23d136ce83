import math

import numpy as np
import pytest

from centermix.caseio import read_case, read_dataset, write_case, write_dataset
from centermix.clinical import ClinicalRecord
from centermix.engine import Graph, Tensor, backward, ops
from centermix.exceptions import ConfigError, ContractError, DimensionError, RoutingError
from centermix.metrics import dice_iou
from centermix.segnet import (
    MaskVolume,
    ModelConfig,
    SegModel,
    Volume,
    preprocess_hu,
    segment_organ,
    segmentation_loss,
    sliding_window_logits,
)
from centermix.synth import build_default_policies, generate_case

from conftest import finite_difference_check


def small_cfg(**kw):
    base = dict(variant="mome", in_channels=2, channels=(4, 8, 12, 16),
                context_dim=8, prompt_tokens=2, n_experts=4, top_k=2,
                centers=("A", "B"), grid=(8, 8, 8), spacing=(1.0, 1.0, 3.0))
    base.update(kw)
    return ModelConfig(**base)


def record():
    return ClinicalRecord(gleason_grade=7, t_stage="T2", n_stage="N0",
                          metastasis="negative", age=65, psa=12.0,
                          prostatectomy=False, therapy_intent="definitive")


@pytest.fixture
def small_inputs(rng):
    image = rng.random((8, 8, 8)).astype(np.float32)
    organ = (rng.random((8, 8, 8)) > 0.7).astype(np.float32)
    return image, organ


class TestLoss:
    def test_perfect_prediction_limit(self, rng):
        y = (rng.random((4, 4, 4)) > 0.5).astype(np.float32)
        logits = Tensor(np.where(y > 0, 20.0, -20.0).astype(np.float32))
        loss = segmentation_loss(logits, y)
        assert loss.item() < 1e-4

    def test_zero_logits_half_ones_bce_ln2(self):
        y = np.zeros((2, 2, 2), dtype=np.float32)
        y.reshape(-1)[:4] = 1.0
        logits = Tensor(np.zeros((2, 2, 2), dtype=np.float32))
        loss = segmentation_loss(logits, y, lambda_ce=1.0, lambda_dice=0.0)
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-6)

    def test_matches_scalar_reference(self, rng):
        z = rng.normal(size=(4, 4, 4)).astype(np.float64)
        y = (rng.random((4, 4, 4)) > 0.5).astype(np.float64)
        lam_ce, lam_dice = 0.7, 1.3
        # per-voxel scalar oracle
        eps = 1e-5
        bce = 0.0
        sp = sy = si = 0.0
        for zi, yi in zip(z.reshape(-1), y.reshape(-1)):
            p = 1.0 / (1.0 + math.exp(-zi))
            bce += -(yi * math.log(p) + (1 - yi) * math.log(1 - p))
            sp += p
            sy += yi
            si += p * yi
        bce /= z.size
        dice = (2 * si + eps) / (sp + sy + eps)
        want = lam_ce * bce + lam_dice * (1 - dice)
        got = segmentation_loss(Tensor(z, dtype=np.float64), y, lam_ce, lam_dice)
        assert got.item() == pytest.approx(want, abs=1e-6)


class TestVolumeTypes:
    def test_volume_validation(self):
        with pytest.raises(ContractError):
            Volume(np.zeros((2, 2, 2)), spacing=(0.0, 1.0, 1.0))
        v = Volume(np.zeros((2, 2, 2)))
        assert v.data.shape == (1, 2, 2, 2)

    def test_mask_binary_enforced(self):
        with pytest.raises(ContractError):
            MaskVolume(np.full((2, 2, 2), 0.5))

    def test_preprocess_hu_range(self):
        raw = np.array([-500.0, -200.0, 25.0, 250.0, 900.0])
        out = preprocess_hu(raw)
        np.testing.assert_allclose(out, [0.0, 0.0, 0.5, 1.0, 1.0])


class TestSegmentOrgan:
    def test_oracle_passthrough(self):
        mask = MaskVolume((np.arange(8).reshape(2, 2, 2) % 2).astype(np.uint8))
        vol = Volume(np.zeros((2, 2, 2)))
        out = segment_organ(vol, oracle_mask=mask)
        np.testing.assert_array_equal(out.data, mask.data)

    def test_zero_logit_boundary_is_background(self, rng):
        cfg = ModelConfig(variant="vision-only", in_channels=1, channels=(2, 4, 4, 4),
                          grid=(8, 8, 8))
        model = SegModel(cfg, rng=np.random.default_rng(0))
        for p in model.params().values():
            p.data[:] = 0.0
        vol = Volume(rng.random((8, 8, 8)).astype(np.float32))
        out = segment_organ(vol, organ_model=model)
        assert out.data.sum() == 0

    def test_requires_model_or_oracle(self):
        with pytest.raises(ContractError):
            segment_organ(Volume(np.zeros((2, 2, 2))))

    def test_grid_mismatch(self):
        with pytest.raises(DimensionError):
            segment_organ(Volume(np.zeros((2, 2, 2))),
                          oracle_mask=MaskVolume(np.zeros((3, 2, 2), dtype=np.uint8)))


class TestSegModelForward:
    def test_output_grid_matches_input(self, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(), rng=rng)
        out = model.forward(image, organ, record(), "A")
        assert out.shape == (8, 8, 8)

    def test_deterministic_inference(self, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(), rng=rng)
        a = model.forward(image, organ, record(), "A").data
        b = model.forward(image, organ, record(), "A").data
        np.testing.assert_array_equal(a, b)

    def test_unregistered_center_rejected(self, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(), rng=rng)
        with pytest.raises(RoutingError):
            model.forward(image, organ, record(), "Q")

    def test_module_bypass_identity(self, rng, small_inputs):
        """Zeroed alignment deltas and expert output layers reduce the
        multimodal forward to the plain encoder/decoder path."""
        image, organ = small_inputs
        mome = SegModel(small_cfg(), rng=np.random.default_rng(3))
        plain = SegModel(small_cfg(variant="vision-only"), rng=np.random.default_rng(4))
        mome_params = mome.params()
        for name, p in plain.params().items():
            p.data = mome_params[name].data.copy()
        for level, block in mome.align.items():
            for attn in (block.self_attn, block.cross_t2i, block.cross_i2t):
                attn.wo.data[:] = 0.0
                attn.bo.data[:] = 0.0
            block.w_mlp2.data[:] = 0.0
            block.b_mlp2.data[:] = 0.0
        for level, moe in mome.moe.items():
            for e in moe.experts:
                e.w2.data[:] = 0.0
                e.b2.data[:] = 0.0
        got = mome.forward(image, organ, record(), "A").data
        want = plain.forward(image, organ, None, "A").data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_hand_separated_routers_change_output(self, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(top_k=1), rng=np.random.default_rng(5))
        for level, moe in model.moe.items():
            moe.routers["A"]["w"].data[:] = 0.0
            moe.routers["B"]["w"].data[:] = 0.0
            moe.routers["A"]["w"].data[:, 0] = 5.0   # A always picks expert 0
            moe.routers["B"]["w"].data[:, 1] = 5.0   # B always picks expert 1
            # make those experts clearly different
            moe.experts[0].w2.data[:] = 0.3
            moe.experts[1].w2.data[:] = -0.3
        out_a = model.forward(image, organ, record(), "A").data
        out_b = model.forward(image, organ, record(), "B").data
        assert not np.allclose(out_a, out_b)

    def test_vanilla_moe_single_router_for_all_flags(self, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(variant="vanilla-moe"), rng=rng)
        assert model.registered_centers() == ["SHARED"]
        a = model.forward(image, organ, record(), "A").data
        b = model.forward(image, organ, record(), "B").data
        np.testing.assert_array_equal(a, b)

    def test_text_prompt_center_token_changes_output(self, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(variant="text-prompt"), rng=rng)
        a = model.forward(image, organ, record(), "A").data
        b = model.forward(image, organ, record(), "B").data
        assert not np.array_equal(a, b)

    def test_route_log_levels(self, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(), rng=rng)
        log = []
        model.forward(image, organ, record(), "A", route_log=log)
        assert len(log) == 4
        assert log[0].shape == (8 * 8 * 8, 2)   # top level tokens, k=2
        assert log[-1].shape == (1 * 1 * 1, 2)  # bottom level 1x1x1 grid

    @pytest.mark.parametrize("grid", [(8, 8, 4), (12, 8, 6), (8, 8, 8)])
    def test_anisotropic_grids_round_trip(self, rng, grid):
        model = SegModel(small_cfg(grid=grid), rng=rng)
        image = rng.random(grid).astype(np.float32)
        organ = (rng.random(grid) > 0.7).astype(np.float32)
        assert model.forward(image, organ, record(), "A").shape == grid

    def test_checkpoint_round_trip(self, tmp_path, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(), rng=np.random.default_rng(11))
        path = tmp_path / "model.ckpt"
        model.save(path)
        loaded = SegModel.load(path)
        a = model.forward(image, organ, record(), "B").data
        b = loaded.forward(image, organ, record(), "B").data
        np.testing.assert_array_equal(a, b)

    def test_closed_center_survives_checkpoint(self, tmp_path, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(), rng=np.random.default_rng(11))
        model.register_center("E", rng=np.random.default_rng(12), copy_from="B")
        path = tmp_path / "model.ckpt"
        model.save(path)
        loaded = SegModel.load(path)
        assert "E" in loaded.registered_centers()
        a = model.forward(image, organ, record(), "E").data
        b = loaded.forward(image, organ, record(), "E").data
        np.testing.assert_array_equal(a, b)


class TestGradients:
    def test_end_to_end_gradient_check(self):
        # top_k == n_experts keeps the gate dense: top-k selection is
        # piecewise constant, so the full-volume check (hundreds of
        # tokens, some always near a selection tie) conditions on one
        # smooth branch; the sparse branch has its own unit-level check.
        rng = np.random.default_rng(31)
        cfg = small_cfg(channels=(2, 4, 4, 4), context_dim=4, prompt_tokens=1,
                        n_experts=3, top_k=3, grid=(8, 8, 4))
        model = SegModel(cfg, rng=np.random.default_rng(1), dtype=np.float64)
        image = rng.random((8, 8, 4))
        organ = (rng.random((8, 8, 4)) > 0.6).astype(np.float64)
        y = (rng.random((8, 8, 4)) > 0.5).astype(np.float64)
        params = model.params()
        probe = [params["enc.l3.stem.w"], params["dec.head.w"],
                 params["align.l2.t2i.wv"], params["moe.l1.expert0.w1"],
                 params["moe.l0.router.A.w"], params["context.prompts"]]

        def loss_fn():
            logits = model.forward(image, organ, record(), "A", mode="infer")
            return segmentation_loss(logits, y)

        finite_difference_check(probe, loss_fn, rng=rng, n_components=6)

    def test_organ_model_gets_no_gradient_when_frozen(self, rng, small_inputs):
        image, organ = small_inputs
        model = SegModel(small_cfg(), rng=rng)
        y = (np.random.default_rng(0).random((8, 8, 8)) > 0.5).astype(np.float32)
        organ_cfg = ModelConfig(variant="vision-only", in_channels=1,
                                channels=(2, 4, 4, 4), grid=(8, 8, 8))
        organ_model = SegModel(organ_cfg, rng=np.random.default_rng(2))
        g = Graph()
        with g.recording():
            logits = model.forward(image, organ, record(), "A", mode="train",
                                   rng=np.random.default_rng(7))
            loss = segmentation_loss(logits, y)
        backward(g, loss)
        assert all(p.grad is None for p in organ_model.params().values())
        assert model.params()["enc.l3.stem.w"].grad is not None


class TestSlidingWindow:
    def test_linear_model_reconstructs_volume(self, rng):
        volume = rng.random((12, 8, 8)).astype(np.float32)
        out = sliding_window_logits(lambda win: win, volume, (8, 8, 8))
        np.testing.assert_allclose(out, volume, atol=1e-6)

    def test_counts_average_constant(self, rng):
        volume = rng.random((12, 12, 8)).astype(np.float32)
        out = sliding_window_logits(lambda win: np.full_like(win, 2.5), volume, (8, 8, 8))
        np.testing.assert_allclose(out, 2.5)

    def test_window_larger_than_volume_rejected(self):
        with pytest.raises(DimensionError):
            sliding_window_logits(lambda w: w, np.zeros((4, 4, 4)), (8, 8, 8))


class TestCaseIO:
    def test_case_round_trip(self, tmp_path):
        policy = build_default_policies()["C"]
        case = generate_case(policy, np.random.default_rng(3), case_id="c3")
        write_case(tmp_path / "c3", case)
        back = read_case(tmp_path / "c3")
        np.testing.assert_allclose(back["image"], case["image"], atol=1e-6)
        np.testing.assert_array_equal(back["ptv"], case["ptv"])
        assert back["record"] == case["record"]
        assert back["center"] == "C"
        assert back["pni_applied"] == case["pni_applied"]

    def test_dataset_round_trip(self, tmp_path):
        policy = build_default_policies()["A"]
        cases = [generate_case(policy, np.random.default_rng(i), case_id=f"a{i}")
                 for i in range(3)]
        write_dataset(tmp_path / "ds", cases, meta={"center": "A", "seed": 0})
        back = read_dataset(tmp_path / "ds")
        assert len(back) == 3
        np.testing.assert_array_equal(back[1]["gtv"], cases[1]["gtv"])


class TestTrainingSmoke:
    def test_few_steps_reduce_loss(self, rng):
        from centermix.engine import AdamW
        cfg = small_cfg(channels=(4, 8, 8, 8), grid=(8, 8, 8))
        model = SegModel(cfg, rng=np.random.default_rng(0))
        image = rng.random((8, 8, 8)).astype(np.float32)
        organ = (rng.random((8, 8, 8)) > 0.6).astype(np.float32)
        y = organ.copy()
        opt = AdamW(model.trainable_params(), lr=3e-3)
        losses = []
        train_rng = np.random.default_rng(5)
        for _ in range(8):
            g = Graph()
            with g.recording():
                logits = model.forward(image, organ, record(), "A", mode="train", rng=train_rng)
                loss = segmentation_loss(logits, y)
            opt.zero_grad()
            backward(g, loss)
            opt.step(skip_missing=True)
            losses.append(loss.item())
        assert losses[-1] < losses[0]
