import numpy as np
import pytest
import torch

from conceptguide.diffusion import ConceptEmbeddingTable, GuidedCondition, select_concept_embedding


def identity_table(mode, K=3, scale2=None):
    E = np.eye(K)
    if mode == "double":
        return ConceptEmbeddingTable.from_arrays("double", E1=E, E2=scale2 * E)
    return ConceptEmbeddingTable.from_arrays(mode, E=E)


def test_positive_selection():
    table = identity_table("positive")
    cond = GuidedCondition(c=[1, 0, 1], mask=[1, 1, 0])
    assert np.allclose(select_concept_embedding(table, cond), [1, 0, 0])


def test_opposite_selection():
    table = identity_table("opposite")
    cond = GuidedCondition(c=[1, 0, 1], mask=[1, 1, 0])
    assert np.allclose(select_concept_embedding(table, cond), [0.5, -0.5, 0])


def test_empty_selection_is_zero():
    for mode in ("positive", "opposite"):
        table = identity_table(mode)
        cond = GuidedCondition(c=[1, 1, 0], mask=[0, 0, 0])
        assert np.allclose(select_concept_embedding(table, cond), [0, 0, 0])


def test_positive_mode_all_negative_is_zero():
    table = identity_table("positive")
    cond = GuidedCondition(c=[0, 0, 0], mask=[1, 1, 1])
    assert np.allclose(select_concept_embedding(table, cond), [0, 0, 0])


def test_double_selection():
    table = identity_table("double", scale2=2.0)
    cond = GuidedCondition(c=[1, 0, 1], mask=[1, 1, 0])
    assert np.allclose(select_concept_embedding(table, cond), [0.5, 1.0, 0])


def test_modes_agree_on_all_positive():
    rng = np.random.default_rng(3)
    E = rng.normal(size=(4, 6))
    pos = ConceptEmbeddingTable.from_arrays("positive", E=E)
    opp = ConceptEmbeddingTable.from_arrays("opposite", E=E)
    dbl = ConceptEmbeddingTable.from_arrays("double", E1=E, E2=rng.normal(size=(4, 6)))
    cond = GuidedCondition(c=[1, 1, 1, 1], mask=[1, 0, 1, 1])
    v_pos = select_concept_embedding(pos, cond)
    v_opp = select_concept_embedding(opp, cond)
    v_dbl = select_concept_embedding(dbl, cond)
    assert np.array_equal(v_pos, v_opp)
    expected = E[[0, 2, 3]].mean(axis=0)
    assert np.allclose(v_dbl, expected, atol=1e-6)


@pytest.mark.parametrize("mode", ["positive", "opposite", "double"])
def test_mask_monotonicity_bit_exact(mode):
    # Bits under mask=0 never influence the output.
    rng = np.random.default_rng(7)
    E = rng.normal(size=(5, 8))
    if mode == "double":
        table = ConceptEmbeddingTable.from_arrays(mode, E1=E, E2=rng.normal(size=(5, 8)))
    else:
        table = ConceptEmbeddingTable.from_arrays(mode, E=E)
    mask = np.array([1, 0, 1, 0, 0])
    c1 = np.array([1, 0, 0, 1, 0])
    c2 = np.array([1, 1, 0, 0, 1])  # differs only where mask == 0
    v1 = select_concept_embedding(table, GuidedCondition(c=c1, mask=mask))
    v2 = select_concept_embedding(table, GuidedCondition(c=c2, mask=mask))
    assert np.array_equal(v1, v2)


def test_length_mismatch_rejected():
    table = identity_table("positive")
    with pytest.raises(ValueError, match="K="):
        select_concept_embedding(table, GuidedCondition(c=[1, 0], mask=[1, 1]))


def test_unknown_mode_rejected():
    with pytest.raises(ValueError, match="mode"):
        ConceptEmbeddingTable(3, 4, "sideways")


def test_condition_validation():
    with pytest.raises(ValueError):
        GuidedCondition(c=[1, 2, 0], mask=[1, 1, 1])
    with pytest.raises(ValueError):
        GuidedCondition(c=[1, 0], mask=[1, 1, 1])


def test_from_pairs():
    names = ("a", "b", "c")
    cond = GuidedCondition.from_pairs(names, {"b": 1, "c": 0})
    assert cond.mask.tolist() == [0, 1, 1]
    assert cond.c.tolist() == [0, 1, 0]
    with pytest.raises(KeyError):
        GuidedCondition.from_pairs(names, {"zzz": 1})


def test_unselected_rows_get_zero_gradient():
    E = np.ones((4, 3))
    table = ConceptEmbeddingTable.from_arrays("positive", E=E)
    c = torch.tensor([[1, 0, 1, 0], [1, 0, 0, 0]])
    mask = torch.ones_like(c)
    out = table.select_batch(c, mask).sum()
    out.backward()
    grad = table.E.grad.numpy()
    assert np.all(grad[1] == 0.0) and np.all(grad[3] == 0.0)
    assert np.any(grad[0] != 0.0)
