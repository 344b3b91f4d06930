"""Cross-domain Gram-matrix consistency."""

import numpy as np
import pytest
import torch

from textshift.alignment import PrototypeSet, TextEmbeddingSet
from textshift.consistency import (StackedEmbeddings, dcrl_loss, gram,
                                   stack_domains)
from textshift.core import unit


def rand(shape, seed, offset=0.0):
    gen = torch.Generator().manual_seed(seed)
    t = torch.empty(shape, dtype=torch.float64)
    t.normal_(0.0, 1.0, generator=gen)
    return t + offset


def unit_rows(n, d, seed):
    return torch.stack([unit(rand((d,), seed + i)) for i in range(n)])


def proto_stack(rows_per_domain, present_per_domain=None, ids=None):
    sets = []
    for i, rows in enumerate(rows_per_domain):
        present = (np.ones(rows.shape[0], bool) if present_per_domain is None
                   else present_per_domain[i])
        did = f"d{i}" if ids is None else ids[i]
        sets.append(PrototypeSet(rows, present, did))
    return stack_domains(sets)


def text_stack(rows_per_domain, d, ids=None):
    sets = []
    for i, rows in enumerate(rows_per_domain):
        did = f"d{i}" if ids is None else ids[i]
        sets.append(TextEmbeddingSet(rows, unit(rand((d,), 9000 + i)), did))
    return stack_domains(sets)


class TestStackDomains:
    def test_count_and_order(self):
        X = proto_stack([rand((3, 4), 1), rand((3, 4), 2)])
        assert X.rows.shape == (6, 4)
        assert [(d, k) for d, k, _ in X.meta] == [
            ("d0", 0), ("d0", 1), ("d0", 2), ("d1", 0), ("d1", 1), ("d1", 2)]
        assert X.kind == "prototype"

    def test_single_domain_is_identity(self):
        rows = rand((3, 4), 3)
        X = proto_stack([rows])
        assert torch.equal(X.rows, rows)

    def test_text_rows_always_present(self):
        X = text_stack([unit_rows(2, 4, 10)], d=4)
        assert X.present.tolist() == [True, True]

    def test_prototype_rows_inherit_presence(self):
        X = proto_stack([rand((2, 4), 4)], [np.array([True, False])])
        assert X.present.tolist() == [True, False]

    def test_mixed_kinds_rejected(self):
        p = PrototypeSet(rand((2, 3), 5), np.ones(2, bool), "a")
        t = TextEmbeddingSet(unit_rows(2, 3, 20), unit(rand((3,), 21)), "b")
        with pytest.raises(TypeError):
            stack_domains([p, t])

    def test_class_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            proto_stack([rand((2, 3), 6), rand((3, 3), 7)])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stack_domains([])

    def test_meta_length_enforced(self):
        with pytest.raises(ValueError):
            StackedEmbeddings(rand((3, 2), 8), [("d", 0, True)], "prototype")


class TestGram:
    def test_symmetric_unit_diagonal(self):
        X = proto_stack([rand((4, 5), 9, offset=0.5)])
        G = gram(X)
        assert torch.allclose(G, G.T, atol=1e-12)
        assert torch.allclose(torch.diag(G), torch.ones(4, dtype=torch.float64),
                              atol=1e-10)

    def test_orthogonal_rows(self):
        X = proto_stack([torch.eye(3, dtype=torch.float64)])
        G = gram(X)
        assert torch.allclose(G, torch.eye(3, dtype=torch.float64), atol=1e-12)

    def test_hand_case(self):
        rows = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
        G = gram(proto_stack([rows]))
        assert abs(float(G[0, 1]) - 1.0 / np.sqrt(2.0)) < 1e-12

    def test_needs_two_rows(self):
        X = proto_stack([rand((2, 3), 10)], [np.array([True, False])])
        with pytest.raises(ValueError):
            gram(X)

    def test_zero_row_named_in_error(self):
        rows = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        X = proto_stack([rows], ids=["fog"])
        with pytest.raises(ValueError, match="fog"):
            gram(X)

    def test_keep_mask_restricts(self):
        rows = rand((3, 4), 11)
        X = proto_stack([rows])
        G = gram(X, keep=np.array([True, False, True]))
        assert G.shape == (2, 2)


class TestDcrlLoss:
    def test_zero_at_consistency(self):
        # identical rows on both sides: the two Grams are bitwise equal
        rows = unit_rows(4, 5, 12)
        C = proto_stack([rows[:2], rows[2:]])
        T = text_stack([rows[:2], rows[2:]], d=5)
        assert float(dcrl_loss(C, T)) == 0.0

    def test_positive_row_scaling_exact_zero_against_self(self):
        rows = unit_rows(4, 5, 112)
        scaled = rows * torch.tensor([[2.0], [0.5], [9.0], [1.0]], dtype=torch.float64)
        C = proto_stack([scaled[:2], scaled[2:]])
        T = text_stack([rows[:2], rows[2:]], d=5)
        assert float(dcrl_loss(C, T)) < 1e-25

    def test_hand_case(self):
        C = proto_stack([torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)],
                        ids=["x"])
        T = text_stack([torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)],
                       d=2, ids=["x"])
        # prototype Gram is I, text Gram is all-ones: MSE = (0+1+1+0)/4
        assert abs(float(dcrl_loss(C, T)) - 0.5) < 1e-12

    def test_row_scale_invariance(self):
        rows = rand((4, 5), 13, offset=0.4)
        T = text_stack([unit_rows(2, 5, 40), unit_rows(2, 5, 50)], d=5)
        base = float(dcrl_loss(proto_stack([rows[:2], rows[2:]]), T))
        scaled = rows.clone()
        scaled[1] *= 7.3
        scaled[2] *= 0.02
        got = float(dcrl_loss(proto_stack([scaled[:2], scaled[2:]]), T))
        assert abs(got - base) < 1e-10

    def test_rotation_invariance(self):
        rows = rand((6, 5), 14, offset=0.2)
        T = text_stack([unit_rows(3, 5, 60), unit_rows(3, 5, 70)], d=5)
        Q, _ = torch.linalg.qr(rand((5, 5), 15))
        base = float(dcrl_loss(proto_stack([rows[:3], rows[3:]]), T))
        rot = rows @ Q.T
        got = float(dcrl_loss(proto_stack([rot[:3], rot[3:]]), T))
        assert abs(got - base) < 1e-8

    def test_symmetry(self):
        a = proto_stack([rand((2, 4), 16, offset=0.5), rand((2, 4), 17, offset=0.5)])
        b = proto_stack([rand((2, 4), 18, offset=0.5), rand((2, 4), 19, offset=0.5)])
        assert abs(float(dcrl_loss(a, b)) - float(dcrl_loss(b, a))) < 1e-15

    def test_absent_rows_dropped_pairwise(self):
        rows = rand((3, 4), 20, offset=0.3)
        present = [np.array([True, False, True])]
        C = proto_stack([rows], present, ids=["x"])
        T = text_stack([unit_rows(3, 4, 80)], d=4, ids=["x"])
        got = float(dcrl_loss(C, T))
        keep = np.array([True, False, True])
        want = float(torch.mean((gram(C, keep) - gram(T, keep)) ** 2))
        assert abs(got - want) < 1e-15

    def test_fewer_than_two_common_rows_warns_zero(self):
        rows = rand((2, 4), 21, offset=0.3)
        C = proto_stack([rows], [np.array([True, False])], ids=["x"])
        T = text_stack([unit_rows(2, 4, 90)], d=4, ids=["x"])
        with pytest.warns(RuntimeWarning):
            got = dcrl_loss(C, T)
        assert float(got) == 0.0

    def test_misordered_stacks_rejected(self):
        C = proto_stack([rand((2, 4), 22)], ids=["a"])
        T = text_stack([unit_rows(2, 4, 91)], d=4, ids=["b"])
        with pytest.raises(ValueError):
            dcrl_loss(C, T)

    def test_size_mismatch_rejected(self):
        C = proto_stack([rand((2, 4), 23)])
        T = text_stack([unit_rows(3, 4, 92)], d=4)
        with pytest.raises(ValueError):
            dcrl_loss(C, T)

    def test_gradient_reaches_prototypes(self):
        rows = rand((4, 3), 24, offset=0.4).requires_grad_(True)
        meta = [("d0", 0, True), ("d0", 1, True), ("d1", 0, True), ("d1", 1, True)]
        C = StackedEmbeddings(rows, list(meta), "prototype")
        T = StackedEmbeddings(unit_rows(4, 3, 93), list(meta), "text")
        dcrl_loss(C, T).backward()
        assert rows.grad is not None
        assert float(rows.grad.abs().max()) > 0
