import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvt import autodiff as ad
from tvt.autodiff import Tensor
from tvt.dcm import mutual_information, mutual_information_loss, target_prediction_probs


def simplex_rows(rng, n, k, concentration=1.0):
    return rng.dirichlet(np.full(k, concentration), size=n)


class TestMutualInformation:
    def test_identical_rows(self):
        rows = np.tile([0.1, 0.6, 0.3], (5, 1))
        assert abs(mutual_information(rows)) <= 1e-12

    def test_one_hot_cover(self):
        assert mutual_information(np.eye(4)) == pytest.approx(math.log(4), abs=1e-12)

    def test_closed_form(self):
        # ln 2 - H([0.9, 0.1]), 30-digit mpmath
        assert mutual_information([[0.9, 0.1], [0.1, 0.9]]) == pytest.approx(0.368064207168497070, abs=1e-15)

    @pytest.mark.parametrize("bad", [[[0.5, 0.6]], [[-0.1, 1.1]], [[np.nan, 1.0]], np.zeros((0, 3))])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            mutual_information(bad)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 12), st.integers(2, 6), st.integers(0, 2**31 - 1), st.sampled_from([0.05, 0.5, 5.0]))
    def test_bounds(self, n, k, seed, conc):
        p = simplex_rows(np.random.default_rng(seed), n, k, conc)
        i = mutual_information(p)
        assert -1e-9 <= i <= math.log(k) + 1e-9

    def test_column_permutation_invariance(self):
        p = simplex_rows(np.random.default_rng(0), 10, 5)
        perm = [3, 0, 4, 1, 2]
        assert mutual_information(p[:, perm]) == pytest.approx(mutual_information(p), abs=1e-15)


class TestTargetPredictions:
    def test_zero_logits_uniform(self):
        p = target_prediction_probs(np.zeros((3, 4)))
        np.testing.assert_allclose(p, 0.25)
        assert abs(mutual_information(p)) <= 1e-12

    def test_temperature(self):
        logits = np.random.default_rng(0).normal(size=(6, 4))
        cond = []
        for scale in (1.0, 5.0, 50.0):
            p = target_prediction_probs(logits * scale)
            cond.append(-np.sum(p * np.log(np.clip(p, 1e-300, None)), axis=1).mean())
        assert cond[0] > cond[1] > cond[2]

    def test_shape(self):
        assert target_prediction_probs(np.zeros((7, 3))).shape == (7, 3)


class TestDifferentiableMI:
    def test_matches_plain_value(self):
        logits = np.random.default_rng(1).normal(size=(9, 4))
        plain = mutual_information(target_prediction_probs(logits))
        assert mutual_information_loss(Tensor(logits)).item() == pytest.approx(plain, abs=1e-14)

    def test_confident_logits_stay_finite(self):
        logits = np.array([[800.0, 0.0, 0.0], [0.0, 800.0, 0.0], [0.0, 0.0, 800.0]])
        assert mutual_information_loss(Tensor(logits)).item() == pytest.approx(math.log(3), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        gamma = 0.1
        params = {"logits": Tensor(np.random.default_rng(2).normal(size=(8, 4)), requires_grad=True)}
        rep = ad.grad_check(lambda: ad.scale(mutual_information_loss(params["logits"]), -gamma), params)
        assert rep.max_rel_error <= 1e-5, rep
