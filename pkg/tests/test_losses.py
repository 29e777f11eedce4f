import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kinsynth.dataio import Gender
from kinsynth.encoder_zoo import FeatureStack
from kinsynth.errors import NonFiniteLossError
from kinsynth.losses import (LOG_EPS, LossWeights, aux_loss_disc, aux_loss_gen, content_loss, cycle_loss,
                             gan_loss_disc, gan_loss_gen, total_loss_disc, total_loss_gen)


def f(x):
    return float(x)


class TestContentLoss:
    def test_identical_stacks(self):
        a = [torch.randn(2, 4, 3, 3), torch.randn(2, 8, 1, 1)]
        assert f(content_loss(a, a)) == 0.0

    def test_hand_example(self):
        # (|1-0| + |2-2| + |3-3| + |4-8|) / 4
        assert f(content_loss([[[1.0, 2.0], [3.0, 4.0]]], [[[0.0, 2.0], [3.0, 8.0]]])) == pytest.approx(1.25, rel=1e-6)

    def test_sums_over_layers(self):
        a = [np.zeros((2, 2)), np.zeros(4)]
        b = [np.full((2, 2), 0.5), np.array([0.25, -0.25, 0.25, -0.25])]
        assert f(content_loss(a, b)) == pytest.approx(0.75, rel=1e-12)

    def test_shape_mismatch_names_layer(self):
        a = FeatureStack([torch.zeros(1, 2, 2, 2), torch.zeros(1, 3, 1, 1)], ["block3", "block4"])
        b = FeatureStack([torch.zeros(1, 2, 2, 2), torch.zeros(1, 4, 1, 1)], ["block3", "block4"])
        with pytest.raises(ValueError, match="block4"):
            content_loss(a, b)

    def test_depth_mismatch(self):
        with pytest.raises(ValueError):
            content_loss([np.zeros(2)], [np.zeros(2), np.zeros(2)])

    def test_cycle_loss_is_content_loss(self):
        a = [torch.randn(3, 5), torch.randn(2)]
        b = [torch.randn(3, 5), torch.randn(2)]
        assert f(cycle_loss(a, b)) == f(content_loss(a, b))
        assert f(cycle_loss(a, a)) == 0.0


stack_pair = st.integers(1, 3).flatmap(
    lambda n: st.tuples(*[
        st.tuples(st.integers(1, 4), st.integers(1, 4)).flatmap(
            lambda shp: st.tuples(arrays(np.float64, shp, elements=st.floats(-10, 10)),
                                  arrays(np.float64, shp, elements=st.floats(-10, 10))))
        for _ in range(n)
    ]))


@settings(max_examples=100, deadline=None)
@given(stack_pair)
def test_content_loss_metric_axioms(layers):
    a = [x for x, _ in layers]
    b = [y for _, y in layers]
    ab, ba = f(content_loss(a, b)), f(content_loss(b, a))
    assert ab >= 0
    assert ab == ba
    assert f(content_loss(a, a)) == 0.0


class TestAuxLosses:
    def test_perfect_confidence(self):
        assert f(aux_loss_disc([1.0, 0.0], Gender.MALE)) == 0.0
        assert f(aux_loss_gen([1.0, 0.0], Gender.MALE)) == 0.0

    def test_uniform_is_ln2(self):
        assert f(aux_loss_disc([0.5, 0.5], Gender.MALE)) == pytest.approx(math.log(2), rel=1e-6)
        assert f(aux_loss_disc([0.5, 0.5], Gender.FEMALE)) == pytest.approx(0.6931471805599453, rel=1e-6)
        assert f(aux_loss_gen([0.5, 0.5], Gender.FEMALE)) == pytest.approx(math.log(2), rel=1e-6)

    def test_generated_face_example(self):
        assert f(aux_loss_gen([0.9, 0.1], Gender.MALE)) == pytest.approx(0.10536051565782628, rel=1e-6)

    def test_zero_probability_is_clamped(self):
        v = f(aux_loss_disc([0.0, 1.0], Gender.MALE))
        assert math.isfinite(v)
        assert v == pytest.approx(-math.log(LOG_EPS), rel=1e-6)

    def test_label_forms_agree(self):
        probs = torch.tensor([[0.8, 0.2], [0.3, 0.7]])
        want = -(math.log(0.8) + math.log(0.7)) / 2
        for label in (torch.tensor([0, 1]), np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]):
            assert f(aux_loss_disc(probs, label)) == pytest.approx(want, rel=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
    def test_strictly_decreasing_in_true_class_probability(self, p, q):
        if abs(p - q) < 1e-9:
            return
        lo, hi = sorted((p, q))
        a = f(aux_loss_gen(torch.tensor([lo, 1 - lo], dtype=torch.float64), Gender.MALE))
        b = f(aux_loss_gen(torch.tensor([hi, 1 - hi], dtype=torch.float64), Gender.MALE))
        assert b < a


class TestGanLosses:
    @pytest.mark.parametrize("real,fake,k,want", [(1.0, 0.5, 0.0, 1.0), (1.0, 0.5, 1.0, 0.5), (0.8, 0.4, 0.5, 0.6)])
    def test_disc(self, real, fake, k, want):
        assert f(gan_loss_disc(real, fake, k)) == pytest.approx(want, rel=1e-6)

    @pytest.mark.parametrize("k", [-0.1, 1.01])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            gan_loss_disc(1.0, 0.5, k)

    def test_gen_is_identity(self):
        assert f(gan_loss_gen(0.37)) == 0.37
        assert f(gan_loss_gen(0.0)) == 0.0
        e = torch.tensor(0.123456789, dtype=torch.float32)
        assert gan_loss_gen(e) is e


class TestComposition:
    def test_default_weights(self):
        w = LossWeights()
        assert (w.lambda_gan, w.lambda_c, w.lambda_p, w.lambda_aux) == (10.0, 0.1, 0.001, 0.1)

    def test_disc_total(self):
        assert f(total_loss_disc(0.6, 0.69)) == pytest.approx(6.069, rel=1e-6)
        assert f(total_loss_disc(0.0, 0.0)) == 0.0
        assert f(total_loss_disc(3.0, 4.0, LossWeights(0, 0, 0, 0))) == 0.0

    def test_gen_total(self):
        # 0.1*1.25 + 0.001*0.5 + 0.37 + 0.1*0.1054
        assert f(total_loss_gen(1.25, 0.5, 0.37, 0.1054)) == pytest.approx(0.50604, rel=1e-6)
        assert f(total_loss_gen(0.0, 0.0, 0.0, 0.0)) == 0.0

    def test_lambda_c_one_variant(self):
        w = LossWeights(lambda_c=1.0)
        assert f(total_loss_gen(1.25, 0.0, 0.0, 0.0, w)) == pytest.approx(1.25)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="lambda_c"):
            LossWeights(lambda_c=-1)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_component_named(self, bad):
        with pytest.raises(NonFiniteLossError, match="aux_G"):
            total_loss_gen(1.0, 1.0, 1.0, bad)
        with pytest.raises(NonFiniteLossError, match="gan_D"):
            total_loss_disc(bad, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=6, max_size=6), st.lists(st.floats(0, 20), min_size=4, max_size=4))
    def test_composition_law(self, comps, lams):
        con_c, con_p, gan_g, aux_g, gan_d, aux_d = comps
        w = LossWeights(*lams)
        want_g = lams[1] * con_c + lams[2] * con_p + gan_g + lams[3] * aux_g
        want_d = lams[0] * gan_d + lams[3] * aux_d
        assert f(total_loss_gen(con_c, con_p, gan_g, aux_g, w)) == pytest.approx(want_g, rel=1e-6, abs=1e-12)
        assert f(total_loss_disc(gan_d, aux_d, w)) == pytest.approx(want_d, rel=1e-6, abs=1e-12)
