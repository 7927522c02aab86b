import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from texguard import perturb as P
from texguard import surrogate as S
from texguard import tensor as T
from texguard.attention import GLOBAL, LOCAL, ClassifierSpec, build_classifier
from texguard.corpus import make_corpus
from texguard.layers import mark_trained
from texguard.metrics import psnr
from texguard.texture import FilterParams, build_texture_params

W = P.LossWeights()
SIZE = 32


@pytest.fixture(scope="module")
def deps():
    ls, gs = ClassifierSpec(LOCAL, input_size=SIZE), ClassifierSpec(GLOBAL, input_size=SIZE)
    return P.Dependencies(build_texture_params(0), mark_trained(build_classifier(ls, 1), 1), ls,
                          mark_trained(build_classifier(gs, 2), 1), gs,
                          {"hair-recolor": mark_trained(S.build_surrogate(3), 1)}, FilterParams(7, 3.0, 0.1))


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(6, 4, size=SIZE)


@pytest.fixture(scope="module")
def prep(deps, corpus):
    return P.prepare(corpus.images, deps)


class TestConfig:
    def test_defaults(self):
        assert (W.lambda1, W.lambda2, W.lambda3, W.T) == (1.0, 0.04, 0.1, 0.3)

    @pytest.mark.parametrize("eps", [0.0, -0.01, 17 / 255])
    def test_epsilon_bounds(self, eps):
        with pytest.raises(ValueError):
            P.DefenseConfig(epsilon=eps)

    def test_epsilon_upper_bound_inclusive(self):
        assert P.DefenseConfig(epsilon=16 / 255).epsilon == 16 / 255

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            P.LossWeights(lambda2=-0.1)


class TestFusion:
    def test_head_has_three_channels(self):
        assert P.build_enhancer(0)["head.weight"].shape[0] == 3

    def test_zero_attention_zeroes_fused(self, prep):
        tape = T.Tape()
        taps = {}
        d = P.fuse_and_enhance(P.build_enhancer(0).bind(tape), tape.const(prep.texture),
                               tape.const(np.zeros_like(prep.attention)), (SIZE, SIZE), taps=taps)
        assert (taps["fused"].value == 0).all()
        assert d.shape == (len(prep.texture), 3, SIZE, SIZE)
        assert np.abs(d.value).max() < 1

    def test_grid_mismatch(self, prep):
        tape = T.Tape()
        with pytest.raises(T.ShapeError):
            P.fuse_and_enhance(P.build_enhancer(0).bind(tape), tape.const(prep.texture[:, :, :5]),
                               tape.const(prep.attention), (SIZE, SIZE))


class TestProjection:
    def test_zero_delta_is_identity(self, rng):
        img = rng.uniform(size=(3, 8, 8))
        assert (P.project_and_apply(img, np.zeros_like(img), 8 / 255) == img).all()

    def test_worst_case_psnr_bound(self):
        eps = 8 / 255
        img = np.full((16, 16, 3), 0.5)
        adv = P.project_and_apply(img, np.where(np.indices(img.shape).sum(0) % 2, 1.0, -1.0), eps)
        bound = -10 * np.log10(eps ** 2)
        assert psnr(img, adv) >= bound - 1e-9
        assert round(bound, 1) == 30.1

    @given(arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)),
           arrays(np.float64, (4, 4, 3), elements=st.floats(-1, 1)), st.floats(1e-3, 16 / 255))
    def test_budget_and_range(self, img, delta, eps):
        adv = P.project_and_apply(img, delta, eps)
        assert adv.min() >= 0 and adv.max() <= 1
        assert np.abs(adv - img).max() <= eps + 1e-12


class TestLosses:
    def test_mae_examples(self, rng):
        a = rng.uniform(size=(3, 4, 4))
        assert P.loss_mae(a, a) == 0
        assert P.loss_mae(a + 0.1, a) == pytest.approx(0.1)
        b = rng.uniform(size=(3, 4, 4))
        assert P.loss_mae(a, b) == pytest.approx(sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size, abs=1e-7)

    def test_mse_examples(self, rng):
        a = rng.uniform(size=(3, 4, 4))
        assert P.loss_mse(a, a) == 0
        assert P.loss_mse(a, a + 0.1) == pytest.approx(-0.01)

    def test_cam_empty_mask(self, rng):
        h = rng.uniform(size=(8, 8))
        assert P.loss_cam(h, h) == (0.0, True)

    def test_cam_half_difference(self):
        a = np.zeros((4, 4))
        b = a.copy()
        b[:2] = 0.5
        val, empty = P.loss_cam(a, b, 0.3)
        assert not empty and val == pytest.approx(-np.log(0.5), abs=1e-6)

    def test_cam_full_difference_is_zero(self):
        val, _ = P.loss_cam(np.zeros((3, 3)), np.eye(3), 0.3)
        assert val == pytest.approx(0.0, abs=1e-12) and val >= 0

    def test_cam_on_tape_matches_array(self, rng, f64):
        a, b = rng.uniform(size=(2, 6, 6)), rng.uniform(size=(2, 6, 6))
        tape = T.Tape()
        v, flag = P.loss_cam(a, tape.leaf(b))
        assert v.value == pytest.approx(P.loss_cam(a, b)[0]) and flag is False

    def test_cam_batch_with_empty_map(self):
        a = np.zeros((2, 2, 2))
        b = a.copy()
        b[0] = 0.5
        val, flag = P.loss_cam(a, b)
        assert val == pytest.approx(-np.log(0.5) / 2) and flag is False

    def test_total_example(self):
        assert P.loss_total(0.1, -0.2, 0.5, W) == pytest.approx(0.142, abs=1e-9)

    def test_total_zero_and_reduction(self):
        assert P.loss_total(0, 0, 0, W) == 0
        assert P.loss_total(0.3, -5.0, 7.0, P.LossWeights(1.0, 0.0, 0.0)) == 0.3

    def test_total_linear_in_each_component(self):
        w = P.LossWeights(0.7, 0.2, 0.05)
        basis = np.eye(3)
        coef = [P.loss_total(*e, w) for e in basis]
        assert coef == [0.7, 0.2, 0.05]
        x = np.array([0.3, -1.2, 2.5])
        assert P.loss_total(*x, w) == pytest.approx(float(np.dot(coef, x)), abs=1e-15)

    @given(arrays(np.float64, (2, 3, 3), elements=st.floats(0, 1)), arrays(np.float64, (2, 3, 3), elements=st.floats(0, 1)))
    def test_signs(self, a, b):
        assert P.loss_mse(a, b) <= 0 and P.loss_mae(a, b) >= 0

    @given(arrays(np.float64, (8,), elements=st.floats(0, 1)), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    def test_mse_monotone_in_distortion(self, g, d1, d2):
        # larger distortion between generated outputs means a lower (more negative) loss
        lo, hi = sorted([d1, d2])
        assert P.loss_mse(g, g + hi) <= P.loss_mse(g, g + lo)


class TestTraining:
    def test_zero_epochs_unchanged(self, prep, deps):
        enh = P.build_enhancer(0)
        out, hist = P.train_defense(prep, deps, P.DefenseConfig(epochs=0), W, enh)
        assert out.equal(enh) and hist == []

    def test_requires_trained_models(self, prep, deps):
        bad = P.Dependencies(deps.texture, build_classifier(deps.local_spec, 1), deps.local_spec, deps.global_,
                             deps.global_spec, deps.surrogates)
        with pytest.raises(ValueError, match="untrained"):
            P.train_defense(prep, bad, P.DefenseConfig(epochs=1), W)

    def test_protect_requires_trained_weights(self, corpus, deps):
        with pytest.raises(ValueError):
            P.protect(corpus.images, P.build_enhancer(0), deps, P.DefenseConfig())

    @pytest.mark.parametrize("variant", P.VARIANTS)
    def test_deterministic_training_and_protection(self, corpus, deps, variant):
        cfg = P.DefenseConfig(epochs=2, batch_size=3, variant=variant)
        prep = P.prepare(corpus.images, deps, variant)
        a, ha = P.train_defense(prep, deps, cfg, W)
        b, hb = P.train_defense(prep, deps, cfg, W)
        assert a.equal(b) and ha == hb and len(ha) == 2
        assert set(ha[0]) == {"epoch", "mae", "mse", "cam", "total"}
        x1, x2 = P.protect(corpus.images, a, deps, cfg), P.protect(corpus.images, a, deps, cfg)
        assert x1.tobytes() == x2.tobytes()
        assert np.abs(x1 - corpus.images).max() <= cfg.epsilon + 1e-12

    def test_local_only_ignores_cam(self, prep, deps):
        tape_total = P.defense_loss(P.build_enhancer(0), prep, np.arange(3), deps,
                                    P.DefenseConfig(variant=P.LOCAL_ONLY))[0]
        ref = P.defense_loss(P.build_enhancer(0), prep, np.arange(3), deps, P.DefenseConfig(variant=P.DUAL),
                             P.LossWeights(lambda3=0.0))[0]
        assert tape_total.value == ref.value

    def test_global_only_uses_uniform_attention(self, corpus, deps):
        att = P.attention_branch(corpus.images, deps, P.GLOBAL_ONLY)
        assert (att == 1).all() and att.shape == corpus.images.shape[:3]
