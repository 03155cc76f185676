import numpy as np
import pytest

from videodefense import tensor as T
from videodefense import losses as L
from videodefense.models import SegModel, FeatureExtractor, TargetModels

from oracles import finite_diff, grads_close


class ConstantModel:
    """Stub classifier emitting a fixed face probability everywhere."""

    def __init__(self, p_face):
        self.p_face = float(p_face)

    def forward(self, x):
        h, w, _ = x.data.shape
        tape = x.tape
        ones = tape.constant(np.ones((h, w, 1)))
        p = T.scalar_mul(ones, self.p_face)
        # tie the constant output to x so the graph stays connected
        p = T.add(p, T.scalar_mul(T.channel_sum(T.scalar_mul(x, 0.0)), 1.0))
        return T.concat_channels([T.sub(ones, p), p])

    def predict(self, x):
        h, w = x.shape[:2]
        probs = np.zeros((h, w, 2))
        probs[:, :, 1] = self.p_face
        probs[:, :, 0] = 1.0 - self.p_face
        return probs


@pytest.fixture
def frame(rng):
    return rng.uniform(0.0, 1.0, (16, 16, 3))


@pytest.fixture
def mask16():
    mask = np.zeros((16, 16), bool)
    mask[4:12, 5:11] = True
    return mask


class TestLossConfig:
    def test_defaults(self):
        cfg = L.LossConfig()
        assert cfg.scales == (2.0, 1.5, 1.0, 0.75, 0.5)
        assert cfg.layer_weights == (1.0, 0.75, 0.5, 0.25)
        assert cfg.epsilon == 1e-8
        assert cfg.target_classes == (1,)

    def test_validation(self):
        with pytest.raises(ValueError):
            L.LossConfig(scales=())
        with pytest.raises(ValueError):
            L.LossConfig(scales=(1.0, -2.0))
        with pytest.raises(ValueError):
            L.LossConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            L.LossConfig(layer_weights=(1.0, -0.1, 0.5, 0.25))


class TestMaskResize:
    def test_stays_binary_and_shape(self, mask16):
        for s in (2.0, 1.5, 0.75, 0.5):
            out = L.resize_mask_nearest(mask16, s)
            assert out.dtype == bool
            assert out.shape == (round(16 * s), round(16 * s))

    def test_identity(self, mask16):
        assert np.array_equal(L.resize_mask_nearest(mask16, 1.0), mask16)

    def test_single_pixel_can_vanish(self):
        mask = np.zeros((8, 8), bool)
        mask[2, 2] = True
        assert not L.resize_mask_nearest(mask, 0.5).any()


class TestMultiscaleSegLoss:
    def test_fully_detected_floor(self, frame, mask16):
        cfg = L.LossConfig(scales=(1.0,))
        tape = T.Tape()
        total, terms, degenerate = L.multiscale_seg_loss(
            tape.constant(frame), mask16, ConstantModel(1.0), cfg)
        assert total.item() == pytest.approx(np.log(1e-8), rel=1e-6)
        assert degenerate == [False]

    def test_fully_fooled_is_zero(self, frame, mask16):
        cfg = L.LossConfig(scales=(1.0,))
        tape = T.Tape()
        total, _, _ = L.multiscale_seg_loss(
            tape.constant(frame), mask16, ConstantModel(0.0), cfg)
        assert total.item() == pytest.approx(np.log1p(1e-8), abs=1e-12)

    def test_half_probability(self, frame, mask16):
        cfg = L.LossConfig(scales=(1.0,))
        tape = T.Tape()
        total, _, _ = L.multiscale_seg_loss(
            tape.constant(frame), mask16, ConstantModel(0.5), cfg)
        assert total.item() == pytest.approx(np.log(0.5 + 1e-8), rel=1e-9)

    def test_sums_over_scales(self, frame, mask16):
        cfg = L.LossConfig()
        tape = T.Tape()
        total, terms, _ = L.multiscale_seg_loss(
            tape.constant(frame), mask16, ConstantModel(0.5), cfg)
        assert len(terms) == 5
        assert total.item() == pytest.approx(5 * np.log(0.5 + 1e-8), rel=1e-9)

    def test_term_bounds(self, frame, mask16, rng):
        cfg = L.LossConfig()
        model = SegModel(weight_seed=11)
        tape = T.Tape()
        _, terms, _ = L.multiscale_seg_loss(tape.constant(frame), mask16, model, cfg)
        for t in terms:
            assert np.log(cfg.epsilon) <= t.item() <= np.log1p(cfg.epsilon)

    def test_monotone_in_target_probability(self, frame, mask16):
        cfg = L.LossConfig(scales=(1.0,))
        values = []
        for p in (0.1, 0.4, 0.7, 0.95):
            tape = T.Tape()
            total, _, _ = L.multiscale_seg_loss(
                tape.constant(frame), mask16, ConstantModel(p), cfg)
            values.append(total.item())
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_vanishing_mask_flagged(self, frame):
        mask = np.zeros((16, 16), bool)
        mask[5, 5] = True
        cfg = L.LossConfig(scales=(1.0, 0.25))
        tape = T.Tape()
        total, terms, degenerate = L.multiscale_seg_loss(
            tape.constant(frame), mask, ConstantModel(0.5), cfg)
        assert degenerate == [False, True]
        assert terms[1].item() == 0.0

    def test_empty_mask_rejected(self, frame):
        tape = T.Tape()
        with pytest.raises(ValueError):
            L.multiscale_seg_loss(tape.constant(frame), np.zeros((16, 16), bool),
                                  ConstantModel(0.5), L.LossConfig())


class TestPerceptualLoss:
    def test_identical_inputs_zero(self, frame):
        fx = FeatureExtractor()
        tape = T.Tape()
        loss = L.perceptual_loss(tape.constant(frame), frame, fx, L.LossConfig())
        assert loss.item() == 0.0

    def test_symmetric(self, rng):
        fx = FeatureExtractor()
        a = rng.uniform(0, 1, (16, 16, 3))
        b = rng.uniform(0, 1, (16, 16, 3))
        tape = T.Tape()
        ab = L.perceptual_loss(tape.constant(a), b, fx, L.LossConfig()).item()
        ba = L.perceptual_loss(tape.constant(b), a, fx, L.LossConfig()).item()
        assert ab == pytest.approx(ba, rel=1e-12)
        assert ab > 0

    def test_linear_in_weights(self, rng):
        fx = FeatureExtractor()
        a = rng.uniform(0, 1, (16, 16, 3))
        b = rng.uniform(0, 1, (16, 16, 3))
        tape = T.Tape()
        single = L.perceptual_loss(tape.constant(a), b, fx, L.LossConfig()).item()
        doubled_cfg = L.LossConfig(layer_weights=(2.0, 1.5, 1.0, 0.5))
        doubled = L.perceptual_loss(tape.constant(a), b, fx, doubled_cfg).item()
        assert doubled == pytest.approx(2 * single, rel=1e-12)

    def test_shape_mismatch(self, rng):
        fx = FeatureExtractor()
        tape = T.Tape()
        with pytest.raises(T.ShapeError):
            L.perceptual_loss(tape.constant(rng.uniform(0, 1, (16, 16, 3))),
                              rng.uniform(0, 1, (18, 18, 3)), fx, L.LossConfig())


class TestTotalLoss:
    def test_both_flags_off_zero(self, frame, mask16):
        cfg = L.LossConfig(perceptual_on=False, multiscale_on=False)
        models = TargetModels(seg=SegModel(weight_seed=5))
        tape = T.Tape()
        xv = tape.variable(frame)
        loss, breakdown = L.total_loss(frame, xv, mask16, models, cfg)
        assert loss.item() == 0.0
        assert breakdown.total == 0.0
        grads = tape.backward(loss)
        assert np.abs(grads[xv]).max() == 0.0

    def test_identity_and_fooled_near_zero(self, frame, mask16):
        models = TargetModels(seg=ConstantModel(0.0))
        cfg = L.LossConfig()
        tape = T.Tape()
        loss, _ = L.total_loss(frame, tape.constant(frame), mask16, models, cfg,
                               include_rates=False)
        assert abs(loss.item()) <= 5 * np.log1p(1e-8) + 1e-12

    def test_recomputation_oracle(self, frame, mask16, rng):
        xp_arr = np.clip(frame + rng.normal(0, 0.02, frame.shape), 0, 1)
        models = TargetModels(seg=SegModel(weight_seed=9))
        cfg = L.LossConfig()
        tape = T.Tape()
        loss, breakdown = L.total_loss(frame, tape.constant(xp_arr), mask16, models, cfg)
        tape2 = T.Tape()
        seg, _, _ = L.multiscale_seg_loss(tape2.constant(xp_arr), mask16, models.seg, cfg)
        tape3 = T.Tape()
        sem = L.perceptual_loss(tape3.constant(xp_arr), frame, models.features, cfg)
        assert loss.item() == pytest.approx(sem.item() - seg.item(), abs=1e-9)
        assert breakdown.perceptual == pytest.approx(sem.item(), abs=1e-12)

    def test_flags_zero_terms(self, frame, mask16):
        models = TargetModels(seg=SegModel(weight_seed=9))
        tape = T.Tape()
        _, bd = L.total_loss(frame, tape.constant(frame), mask16, models,
                             L.LossConfig(perceptual_on=False), include_rates=False)
        assert bd.perceptual == 0.0
        tape = T.Tape()
        _, bd = L.total_loss(frame, tape.constant(frame), mask16, models,
                             L.LossConfig(multiscale_on=False), include_rates=False)
        assert bd.seg_terms == []

    def test_gradient_matches_finite_differences(self, mask16, rng):
        from videodefense.perturbation import PerturbationState, build_perturbed, init_attention

        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        delta0 = 0.1 * (rng.normal(size=(16, 16, 3)) + 1j * rng.normal(size=(16, 16, 3)))
        logits0 = init_attention(mask16)
        models = TargetModels(seg=SegModel(weight_seed=13))
        cfg = L.LossConfig(scales=(1.0, 0.5))

        def f(arrays):
            state = PerturbationState(arrays[0], arrays[1])
            tape = T.Tape()
            xp, _, _ = build_perturbed(tape, x, state, 0.05)
            loss, _ = L.total_loss(x, xp, mask16, models, cfg, include_rates=False)
            return loss.item()

        state = PerturbationState(delta0, logits0)
        tape = T.Tape()
        xp, dvar, lvar = build_perturbed(tape, x, state, 0.05)
        loss, _ = L.total_loss(x, xp, mask16, models, cfg, include_rates=False)
        grads = tape.backward(loss)
        g_fd = finite_diff(f, [delta0, logits0], h=1e-3)
        assert grads_close(grads[dvar], g_fd[0])
        assert grads_close(grads[lvar], g_fd[1])


class TestMisclassificationRates:
    def test_constant_background_model(self, frame, mask16):
        rates, degenerate = L.misclassification_rates(
            frame, mask16, ConstantModel(0.0), L.LossConfig())
        assert rates == [1.0] * 5
        assert degenerate == [False] * 5

    def test_constant_face_model(self, frame, mask16):
        rates, _ = L.misclassification_rates(
            frame, mask16, ConstantModel(1.0), L.LossConfig())
        assert rates == [0.0] * 5

    def test_brute_force_count(self, frame, mask16):
        model = SegModel(weight_seed=21)
        cfg = L.LossConfig(scales=(1.0,))
        rates, _ = L.misclassification_rates(frame, mask16, model, cfg)
        pred = model.predict(frame).argmax(axis=2)
        hits, n = 0, 0
        for i in range(16):
            for j in range(16):
                if mask16[i, j]:
                    n += 1
                    if pred[i, j] != 1:
                        hits += 1
        assert rates[0] == pytest.approx(hits / n)

    def test_empty_resized_mask(self, frame):
        mask = np.zeros((16, 16), bool)
        mask[5, 5] = True
        cfg = L.LossConfig(scales=(0.25,))
        rates, degenerate = L.misclassification_rates(frame, mask, ConstantModel(1.0), cfg)
        assert rates == [1.0]
        assert degenerate == [True]

    def test_clean_frame_low_rate_at_native_scale(self, trained_model, canonical_sequence):
        cfg = L.LossConfig()
        rates, _ = L.misclassification_rates(
            canonical_sequence.frames[0], canonical_sequence.masks[0],
            trained_model, cfg)
        assert rates[2] <= 0.05  # scale 1.0 on a well-trained model


class TestBreakdownSerialization:
    def test_json_fields(self):
        bd = L.LossBreakdown(seg_terms=[-1.0], degenerate=[False],
                             perceptual=0.5, total=1.5, rates=[0.9] * 5)
        d = bd.to_json_dict()
        assert set(d) == {"seg_terms", "degenerate", "perceptual", "total", "rates"}
