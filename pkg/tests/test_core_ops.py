"""
Test cases for the numerical primitives.
"""

import itertools
import math
import unittest

import torch

from disentangle_seg.core_ops import (
    HuberConfig,
    angle_potential,
    class_softmax,
    cosine_matrix,
    cosine_sim,
    distance_potential,
    huber,
    kl_divergence,
    masked_mean_pool,
    topk_similar_pairs,
)
from disentangle_seg.exceptions import DomainError
from tests.test_config import BaseTestCase


class TestCosine(BaseTestCase):
    """Test cases for cosine similarity."""

    def test_parallel_and_orthogonal(self):
        """Test the two extreme directions."""
        a = torch.tensor([1.0, 0.0, 0.0])
        self.assertAlmostEqual(float(cosine_sim(a, 3 * a)), 1.0, places=12)
        self.assertAlmostEqual(float(cosine_sim(a, torch.tensor([0.0, 2.0, 0.0]))), 0.0)

    def test_zero_vector_names_argument(self):
        """Test that a zero-norm input raises a domain error naming it."""
        a = torch.ones(3)
        with self.assertRaises(DomainError) as cm:
            cosine_sim(a, torch.zeros(3))
        self.assertEqual(cm.exception.argument, "b")

    def test_matrix_matches_pairwise(self):
        """Test that the cosine matrix equals pairwise evaluations."""
        t = torch.randn(5, 4)
        m = cosine_matrix(t)
        for i, j in itertools.product(range(5), repeat=2):
            self.assertAlmostEqual(float(m[i, j]), float(cosine_sim(t[i], t[j])), places=12)


class TestHuber(BaseTestCase):
    """Test cases for the Huber penalty."""

    def test_quadratic_and_linear_regions(self):
        """Test both branches around delta."""
        cfg = HuberConfig(1.0)
        self.assertAlmostEqual(float(huber(torch.tensor(0.5), 0.0, cfg)), 0.125)
        self.assertAlmostEqual(float(huber(torch.tensor(3.0), 0.0, cfg)), 2.5)

    def test_non_positive_delta(self):
        """Test that delta must be positive."""
        with self.assertRaises(DomainError):
            HuberConfig(0.0)

    def test_plain_numbers(self):
        """Test that non-tensor inputs are accepted."""
        self.assertEqual(float(huber(2.0, 2.0)), 0.0)


class TestDistancePotential(BaseTestCase):
    """Test cases for the distance matrix."""

    def test_mean_normalisation(self):
        """Test that the off-diagonal mean is one after normalisation."""
        t = torch.randn(4, 3)
        d = distance_potential(t)
        self.assertAlmostEqual(float(d.sum() / 12), 1.0, places=12)
        self.assertTrue(torch.all(torch.diagonal(d) == 0))

    def test_right_triangle(self):
        """Test raw distances of a 3-4-5 triangle."""
        t = torch.tensor([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
        d = distance_potential(t, normalize=False)
        self.assertAlmostEqual(float(d[1, 2]), 5.0)
        self.assertAlmostEqual(float(d[0, 2]), 4.0)

    def test_coincident_points(self):
        """Test that identical rows give zero distance and a finite gradient."""
        t = torch.ones(3, 2, requires_grad=True)
        d = distance_potential(t)
        self.assertEqual(float(d.abs().sum()), 0.0)
        d.sum().backward()
        self.assertTrue(torch.isfinite(t.grad).all())

    def test_needs_two_vectors(self):
        """Test that a single vector is rejected."""
        with self.assertRaises(DomainError):
            distance_potential(torch.randn(1, 3))

    def test_gradcheck(self):
        """Test gradients against central differences."""
        t = torch.randn(4, 3, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(distance_potential, (t,), eps=1e-5))


class TestAnglePotential(BaseTestCase):
    """Test cases for the angle cosine."""

    def test_right_angle(self):
        """Test the vertex of a right angle."""
        ti = torch.tensor([1.0, 0.0])
        tj = torch.tensor([0.0, 0.0])
        tk = torch.tensor([0.0, 1.0])
        self.assertAlmostEqual(float(angle_potential(ti, tj, tk)), 0.0)
        self.assertAlmostEqual(float(angle_potential(tk, ti, tj)), math.sqrt(0.5))

    def test_degenerate_vertex(self):
        """Test that a vertex equal to an endpoint is rejected."""
        a = torch.ones(2)
        with self.assertRaises(DomainError):
            angle_potential(a, a, torch.zeros(2))

    def test_batched(self):
        """Test leading batch dimensions."""
        x = torch.randn(5, 3, 4)
        out = angle_potential(x[:, 0], x[:, 1], x[:, 2])
        self.assertEqual(out.shape, (5,))


class TestSoftmaxAndKl(BaseTestCase):
    """Test cases for the class softmax and KL divergence."""

    def test_softmax_sums_over_classes(self):
        """Test that columns sum to one."""
        p = class_softmax(torch.randn(2, 5, 7), temperature=2.0)
        self.assertTensorClose(p.sum(dim=-2), torch.ones(2, 7))

    def test_temperature_must_be_positive(self):
        """Test the temperature guard."""
        with self.assertRaises(DomainError):
            class_softmax(torch.randn(3, 2), temperature=0.0)

    def test_kl_of_identical_is_zero(self):
        """Test that KL(P, P) is exactly zero within 1e-9."""
        p = class_softmax(torch.randn(4, 6))
        self.assertLess(abs(float(kl_divergence(p, p))), 1e-9)

    def test_kl_known_value(self):
        """Test a two-class column against the closed form."""
        p = torch.tensor([[0.5], [0.5]])
        q = torch.tensor([[0.25], [0.75]])
        expected = 0.5 * math.log(2) + 0.5 * math.log(0.5 / 0.75)
        self.assertAlmostEqual(float(kl_divergence(p, q)), expected, places=12)

    def test_kl_shape_mismatch(self):
        """Test that mismatched shapes are rejected."""
        with self.assertRaises(DomainError):
            kl_divergence(torch.ones(2, 3) / 2, torch.ones(3, 3) / 3)


class TestMaskedMeanPool(BaseTestCase):
    """Test cases for masked mean pooling."""

    def test_mean_of_selected_rows(self):
        """Test the average of the chosen rows."""
        v = torch.arange(12.0).reshape(4, 3)
        mask = torch.tensor([[True, False], [False, True]])
        self.assertTensorClose(masked_mean_pool(mask, v), (v[0] + v[3]) / 2)

    def test_empty_mask(self):
        """Test that an empty mask yields None."""
        self.assertIsNone(masked_mean_pool(torch.zeros(2, 2, dtype=torch.bool), torch.ones(4, 3)))

    def test_size_mismatch(self):
        """Test that a mask of the wrong size is rejected."""
        with self.assertRaises(DomainError):
            masked_mean_pool(torch.ones(3, dtype=torch.bool), torch.ones(4, 2))

    def test_area_invariance(self):
        """Test that repeating a constant region does not change the mean."""
        v = torch.ones(8, 2)
        small = torch.zeros(8, dtype=torch.bool)
        small[0] = True
        self.assertTensorClose(masked_mean_pool(small, v), masked_mean_pool(~small, v))


class TestTopkPairs(BaseTestCase):
    """Test cases for the most-similar directed pairs."""

    def test_symmetric_pairs_ordered(self):
        """Test that both directions of the closest pair come first."""
        t = torch.tensor([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        self.assertEqual(topk_similar_pairs(t, 2), [(0, 1), (1, 0)])

    def test_ties_by_index(self):
        """Test that ties fall back to ascending indices."""
        t = torch.eye(3)
        self.assertEqual(topk_similar_pairs(t, 3), [(0, 1), (0, 2), (1, 0)])

    def test_k_out_of_range(self):
        """Test both bounds on k."""
        t = torch.randn(3, 2)
        for k in (0, 7):
            with self.assertRaises(DomainError):
                topk_similar_pairs(t, k)

    def test_matches_exhaustive_scan(self):
        """Test against sorting every pair by cosine."""
        t = torch.randn(5, 4)
        cos = cosine_matrix(t)
        pairs = sorted(
            ((i, j) for i in range(5) for j in range(5) if i != j),
            key=lambda ij: -float(cos[ij]),
        )
        self.assertEqual(topk_similar_pairs(t, 6), pairs[:6])


if __name__ == "__main__":
    unittest.main()
