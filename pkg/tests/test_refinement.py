import numpy as np
import pytest
import torch

from incproto.errors import RefinementError
from incproto.prototypes import PrototypeMatrix
from incproto.refinement import PrototypeRefiner, refine, relation_weights


def matrix_from(rows, labels, dtype=torch.float64):
    return PrototypeMatrix(
        rows=torch.as_tensor(rows, dtype=dtype),
        registry={lab: i for i, lab in enumerate(labels)},
    )


def identity_refiner(d):
    return PrototypeRefiner(d, identity=True).double()


class TestRelationWeightsIdentityMode:
    def test_orthonormal_self_similarity(self):
        protos = matrix_from(np.eye(2), ["a", "b"])
        weights = relation_weights(protos, protos, identity_refiner(2))
        assert torch.allclose(weights, torch.eye(2, dtype=torch.float64))

    def test_hand_computed_dot_products(self):
        p_pre = matrix_from([[1.0, 1.0], [0.0, 2.0]], ["a", "b"])
        p_init = matrix_from([[2.0, 0.0]], ["c"])
        weights = relation_weights(p_init, p_pre, identity_refiner(2))
        assert torch.allclose(weights, torch.tensor([[2.0, 0.0]], dtype=torch.float64))

    def test_shape_contract(self):
        rng = np.random.default_rng(0)
        p_init = matrix_from(rng.normal(size=(7, 5)), [f"i{i}" for i in range(7)])
        p_pre = matrix_from(rng.normal(size=(3, 5)), [f"p{i}" for i in range(3)])
        refiner = PrototypeRefiner(5).double()
        assert relation_weights(p_init, p_pre, refiner).shape == (7, 3)

    def test_dimension_mismatch(self):
        p_init = matrix_from(np.eye(3), ["a", "b", "c"])
        p_pre = matrix_from(np.eye(2), ["d", "e"])
        with pytest.raises(RefinementError):
            relation_weights(p_init, p_pre, identity_refiner(3))

    def test_empty_previous(self):
        p_init = matrix_from(np.eye(2), ["a", "b"])
        empty = PrototypeMatrix(rows=torch.empty(0, 2, dtype=torch.float64), registry={})
        with pytest.raises(RefinementError):
            relation_weights(p_init, empty, identity_refiner(2))


class TestRefineIdentityMode:
    def test_identity_previous_passes_through(self):
        p_pre = matrix_from(np.eye(3), ["a", "b", "c"])
        p_init = matrix_from([[1.0, 2.0, 0.5], [0.0, 1.0, 3.0]], ["x", "y"])
        refined = refine(p_init, p_pre, identity_refiner(3))
        assert torch.allclose(refined.rows, p_init.rows)
        assert refined.registry == p_init.registry

    def test_hand_computed_refinement(self):
        # weights [2, 0] over rows [[1,1],[0,2]] -> 2*[1,1] + 0*[0,2] = [2,2]
        p_pre = matrix_from([[1.0, 1.0], [0.0, 2.0]], ["a", "b"])
        p_init = matrix_from([[2.0, 0.0]], ["c"])
        refined = refine(p_init, p_pre, identity_refiner(2))
        assert torch.allclose(refined.rows, torch.tensor([[2.0, 2.0]], dtype=torch.float64))

    def test_registry_copied_from_init(self):
        p_pre = matrix_from(np.eye(2), ["a", "b"])
        p_init = matrix_from(np.abs(np.random.default_rng(0).normal(size=(4, 2))),
                             ["w", "x", "y", "z"])
        refined = refine(p_init, p_pre, identity_refiner(2))
        assert list(refined.registry) == ["w", "x", "y", "z"]
        assert refined.rows.shape == (4, 2)


def stacked_rank(p_pre, p_re, tol=1e-8):
    stacked = torch.cat([p_pre, p_re]).detach().numpy()
    s = np.linalg.svd(stacked, compute_uv=False)
    return int(np.sum(s > tol * s[0]))


class TestSpanProperty:
    def test_refined_rows_stay_in_previous_span(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            n_pre = rng.integers(1, 6)
            n_init = rng.integers(1, 8)
            d = rng.integers(2, 9)
            p_pre = matrix_from(rng.normal(size=(n_pre, d)), [f"p{i}" for i in range(n_pre)])
            p_init = matrix_from(rng.normal(size=(n_init, d)), [f"i{i}" for i in range(n_init)])
            refiner = PrototypeRefiner(int(d)).double()
            refiner.train(False)
            refined = refine(p_init, p_pre, refiner)
            pre_rank = stacked_rank(p_pre.rows, torch.empty(0, d, dtype=torch.float64))
            assert stacked_rank(p_pre.rows, refined.rows) == pre_rank

    def test_span_holds_with_softmax_variant(self):
        rng = np.random.default_rng(3)
        p_pre = matrix_from(rng.normal(size=(3, 6)), ["a", "b", "c"])
        p_init = matrix_from(rng.normal(size=(5, 6)), [f"i{i}" for i in range(5)])
        refiner = PrototypeRefiner(6, row_softmax=True).double()
        refiner.train(False)
        refined = refine(p_init, p_pre, refiner)
        assert stacked_rank(p_pre.rows, refined.rows) == stacked_rank(
            p_pre.rows, torch.empty(0, 6, dtype=torch.float64)
        )


class TestGradients:
    def test_block_gradients_match_finite_differences(self):
        from gradcheck import REL_TOL, max_relative_error

        torch.manual_seed(0)
        d, n_init, n_pre = 4, 3, 2
        refiner = PrototypeRefiner(d).double()
        refiner.train(True)
        rng = np.random.default_rng(5)
        p_init = matrix_from(rng.normal(size=(n_init, d)), ["a", "b", "c"])
        p_pre = matrix_from(rng.normal(size=(n_pre, d)), ["x", "y"])
        probe = torch.as_tensor(rng.normal(size=(n_init, d)))

        def loss_fn():
            return (refine(p_init, p_pre, refiner).rows * probe).sum()

        worst = max_relative_error(loss_fn, list(refiner.parameters()))
        assert worst < REL_TOL

    def test_frozen_refiner_is_pure(self):
        refiner = PrototypeRefiner(3).double()
        from incproto.backbone import set_frozen

        set_frozen(refiner, True)
        rng = np.random.default_rng(1)
        p_init = matrix_from(rng.normal(size=(4, 3)), list("abcd"))
        p_pre = matrix_from(rng.normal(size=(2, 3)), list("xy"))
        a = refine(p_init, p_pre, refiner).rows
        b = refine(p_init, p_pre, refiner).rows
        assert torch.equal(a, b)
