import numpy as np
import pytest
import torch

from conceptguide.data import generate_synthetic
from conceptguide.proto import (
    BackboneConfig,
    ConvBackbone,
    PrototypeBank,
    cluster_cost,
    concept_logits,
    extract_patches,
    init_last_layer,
    predict_probabilities,
    project_prototypes,
    receptive_field_box,
    separation_cost,
    similarity,
)
from conceptguide.proto.core import group_min_distances, patch_grid, squared_distances

from oracles import (
    brute_cluster_cost,
    brute_nearest_patch,
    brute_separation_cost,
    central_difference_gradient,
    random_tiny_instance,
)


def dmin_from(patches_per_image, prototypes, dtype=torch.float64):
    pro = torch.as_tensor(np.asarray(prototypes), dtype=dtype)
    rows = []
    for p in patches_per_image:
        pat = torch.as_tensor(np.asarray(p), dtype=dtype).unsqueeze(0)
        rows.append(squared_distances(pat, pro).min(dim=1).values[0])
    return torch.stack(rows)


def members_from(assignment, K):
    return [np.flatnonzero(np.asarray(assignment) == g) for g in range(2 * K)]


# ---------------------------------------------------------------- patches


def test_extract_patches_single():
    grid = np.arange(5, dtype=float).reshape(1, 1, 5)
    patches = extract_patches(grid)
    assert len(patches) == 1
    vec, r, c = patches[0]
    assert np.array_equal(vec, grid[0, 0]) and (r, c) == (0, 0)


def test_extract_patches_order_and_reassembly():
    grid = np.random.default_rng(0).normal(size=(2, 2, 3))
    patches = extract_patches(grid)
    assert [(r, c) for _, r, c in patches] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    rebuilt = np.zeros_like(grid)
    for vec, r, c in patches:
        rebuilt[r, c] = vec
    assert np.array_equal(rebuilt, grid)


def test_patch_grid_matches_extract_patches():
    grid = torch.randn(1, 4, 3, 2)  # (B, D, H', W')
    flat = patch_grid(grid)[0].numpy()
    listed = extract_patches(grid[0].permute(1, 2, 0).numpy())
    for i, (vec, r, c) in enumerate(listed):
        assert np.allclose(flat[i], vec)


# ---------------------------------------------------------------- similarity


def test_similarity_zero_distance():
    d2, act = similarity([1.0, 2.0], [1.0, 2.0])
    assert d2 == 0.0
    assert act == pytest.approx(np.log(1e4), abs=1e-9)  # ~9.2103


def test_similarity_example():
    d2, act = similarity([1.0, 0.0], [0.0, 1.0])
    assert d2 == pytest.approx(2.0)
    assert act == pytest.approx(np.log(3.0 / 2.0001), abs=1e-9)  # ~0.4054


def test_similarity_limit():
    _, act = similarity([1e6], [0.0])
    assert 0 < act < 1e-9


def test_similarity_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        similarity([1.0, 2.0], [1.0])


# ---------------------------------------------------------------- costs


def test_cluster_cost_zero_at_match():
    # one image, one concept, single patch equals the sole positive prototype
    dmin = dmin_from([np.array([[1.0, 2.0]])], np.array([[9.0, 9.0], [1.0, 2.0]]))
    members = members_from([0, 1], K=1)
    c = torch.tensor([[1]])
    assert float(cluster_cost(dmin, members, c)) == pytest.approx(0.0, abs=1e-12)


def test_cluster_cost_hand_example():
    # patches {(0,0)}, P_1^1 = {(3,4)}, P_2^0 = {(0,1)}, c = (1, 0) -> 13
    patches = [np.array([[0.0, 0.0]])]
    protos = np.array([[3.0, 4.0], [0.0, 1.0]])
    assignment = [1, 2]  # class 2k+v: concept0 positive=1, concept1 negative=2
    dmin = dmin_from(patches, protos)
    members = members_from(assignment, K=2)
    c = torch.tensor([[1, 0]])
    assert float(cluster_cost(dmin, members, c)) == pytest.approx(13.0, abs=1e-12)


def test_separation_cost_hand_example():
    # opposite groups P_1^0 = {(0,2)}, P_2^1 = {(5,0)} -> -(4 + 25)/2 = -14.5
    patches = [np.array([[0.0, 0.0]])]
    protos = np.array([[0.0, 2.0], [5.0, 0.0]])
    assignment = [0, 3]
    dmin = dmin_from(patches, protos)
    members = members_from(assignment, K=2)
    c = torch.tensor([[1, 0]])
    assert float(separation_cost(dmin, members, c)) == pytest.approx(-14.5, abs=1e-12)


def test_adding_farther_prototype_never_increases_clst():
    rng = np.random.default_rng(4)
    patches, protos, assignment, concepts = random_tiny_instance(rng)
    dmin = dmin_from(patches, protos)
    base = float(cluster_cost(dmin, members_from(assignment, concepts.shape[1]), torch.as_tensor(concepts)))
    far = np.concatenate([protos, [protos[0] + 100.0]])
    assignment2 = np.concatenate([assignment, [assignment[0]]])
    dmin2 = dmin_from(patches, far)
    new = float(cluster_cost(dmin2, members_from(assignment2, concepts.shape[1]), torch.as_tensor(concepts)))
    assert new <= base + 1e-12


def test_separation_cost_nonpositive_random():
    rng = np.random.default_rng(5)
    for _ in range(20):
        patches, protos, assignment, concepts = random_tiny_instance(rng)
        dmin = dmin_from(patches, protos)
        sep = float(separation_cost(dmin, members_from(assignment, concepts.shape[1]), torch.as_tensor(concepts)))
        assert sep <= 1e-12


def test_costs_match_brute_force_100_instances():
    rng = np.random.default_rng(123)
    for _ in range(100):
        patches, protos, assignment, concepts = random_tiny_instance(rng)
        K = concepts.shape[1]
        dmin = dmin_from(patches, protos)
        members = members_from(assignment, K)
        clst = float(cluster_cost(dmin, members, torch.as_tensor(concepts)))
        sep = float(separation_cost(dmin, members, torch.as_tensor(concepts)))
        assert abs(clst - brute_cluster_cost(patches, protos, assignment, concepts)) < 1e-9
        assert abs(sep - brute_separation_cost(patches, protos, assignment, concepts)) < 1e-9


def test_empty_group_raises():
    dmin = dmin_from([np.array([[0.0, 0.0]])], np.array([[1.0, 1.0]]))
    members = members_from([1], K=1)  # no negative-class prototype
    with pytest.raises(ValueError, match="concept class"):
        cluster_cost(dmin, members, torch.tensor([[0]]))
    with pytest.raises(ValueError, match="concept class"):
        separation_cost(dmin, members, torch.tensor([[1]]))


def test_cost_gradients_match_finite_differences():
    # 2-image, K=2, D_f=3 toy; analytic (autograd) vs central differences.
    rng = np.random.default_rng(77)
    patches = [rng.normal(size=(3, 3)), rng.normal(size=(2, 3))]
    protos0 = rng.normal(size=(5, 3))
    assignment = np.array([0, 1, 2, 3, 1])
    concepts = torch.tensor([[1, 0], [0, 1]])
    members = members_from(assignment, 2)

    for cost in (cluster_cost, separation_cost):

        def value(P):
            dmin = dmin_from(patches, P)
            return float(cost(dmin, members, concepts))

        P = torch.as_tensor(protos0, dtype=torch.float64).requires_grad_(True)
        pat = [torch.as_tensor(p, dtype=torch.float64) for p in patches]
        dmin = torch.stack(
            [squared_distances(p.unsqueeze(0), P).min(dim=1).values[0] for p in pat]
        )
        loss = cost(dmin, members, concepts)
        loss.backward()
        fd = central_difference_gradient(value, protos0.copy(), step=1e-4)
        analytic = P.grad.numpy()
        denom = max(np.abs(fd).max(), 1e-8)
        assert np.abs(analytic - fd).max() / denom < 1e-4


# ---------------------------------------------------------------- projection


@pytest.fixture(scope="module")
def pushed_setup(tmp_path_factory):
    out = tmp_path_factory.mktemp("proj")
    ds = generate_synthetic("shapes8", 20, 16, seed=13, out_dir=out / "d")
    backbone = ConvBackbone(BackboneConfig(feature_depth=16, param_seed=1))
    K = ds.K
    m = 2 * K
    gen = torch.Generator().manual_seed(2)
    bank = PrototypeBank(
        prototypes=torch.rand(m, 16, generator=gen),
        assignment=np.arange(m) % (2 * K),
        K=K,
    )
    pushed = project_prototypes(bank, ds, backbone)
    return ds, backbone, bank, pushed


def test_projection_fixed_point(pushed_setup):
    ds, backbone, _, pushed = pushed_setup
    again = project_prototypes(pushed, ds, backbone)
    for j in range(pushed.m_p):
        assert again.provenance[j]["distance"] == pytest.approx(0.0, abs=1e-5)
        assert torch.allclose(again.prototypes[j], pushed.prototypes[j], atol=1e-6)


def test_projection_matches_exhaustive_scan(pushed_setup):
    ds, backbone, bank, pushed = pushed_setup
    from conceptguide.proto.core import compute_feature_grids

    examples = sorted(ds.examples, key=lambda ex: ex.id)
    grids = compute_feature_grids(backbone, np.stack([e.image for e in examples]))
    flat = patch_grid(grids).numpy()
    Wp = grids.shape[3]
    for j in range(bank.m_p):
        k, v = divmod(int(bank.assignment[j]), 2)
        cands = []
        for i, ex in enumerate(examples):
            if ex.c[k] != v:
                continue
            for p in range(flat.shape[1]):
                cands.append(((ex.id, p // Wp, p % Wp), flat[i, p]))
        key, vec, d2 = brute_nearest_patch(cands, bank.prototypes[j].detach().numpy())
        prov = pushed.provenance[j]
        assert (prov["image_id"], prov["row"], prov["col"]) == key
        assert np.allclose(pushed.prototypes[j].numpy(), vec, atol=1e-5)


def test_projection_single_candidate():
    class Ex:
        def __init__(self):
            self.id = "only"
            self.image = np.full((16, 16, 3), 0.5)
            self.c = np.array([1])

    class DS:
        examples = [Ex()]

    backbone = ConvBackbone(BackboneConfig(feature_depth=8, param_seed=0))
    # shrink to a single patch by evaluating distances on the 2x2 grid anyway
    bank = PrototypeBank(prototypes=torch.zeros(1, 8), assignment=np.array([1]), K=1)
    pushed = project_prototypes(bank, DS(), backbone)
    assert pushed.provenance[0]["image_id"] == "only"


def test_projection_empty_eligible_set_errors(pushed_setup):
    ds, backbone, _, _ = pushed_setup
    lonely = PrototypeBank(prototypes=torch.zeros(1, 16), assignment=np.array([1]), K=ds.K)
    with pytest.raises(ValueError, match="no eligible"):
        project_prototypes(lonely, ds, backbone, eligible_images=[[]])


# ---------------------------------------------------------------- last layer


def test_last_layer_hand_example():
    W = init_last_layer(np.array([1, 0]), K=1)  # one positive, one negative prototype
    scores = torch.tensor([[3.0, 1.0]])
    logits = concept_logits(scores, W)
    assert logits.squeeze().item() == pytest.approx(2.0)
    assert float(predict_probabilities(logits).squeeze()) == pytest.approx(0.8808, abs=1e-4)


def test_last_layer_equal_scores_balanced():
    K = 3
    assignment = np.arange(2 * K) % (2 * K)
    W = init_last_layer(assignment, K)
    scores = torch.full((1, 2 * K), 2.5)
    probs = predict_probabilities(concept_logits(scores, W))
    assert torch.allclose(probs, torch.full((1, K), 0.5))


def test_last_layer_swap_negates():
    assignment = np.array([1, 0, 1, 0])
    swapped = np.array([0, 1, 0, 1])
    scores = torch.tensor([[0.3, 1.7, 2.2, 0.1]])
    l1 = concept_logits(scores, init_last_layer(assignment, 1))
    l2 = concept_logits(scores, init_last_layer(swapped, 1))
    assert torch.allclose(l1, -l2)


def test_last_layer_sparsity():
    K = 4
    per = 3
    assignment = np.arange(2 * K * per) % (2 * K)
    W = init_last_layer(assignment, K)
    for k in range(K):
        assert int((W[k] != 0).sum()) == 2 * per


def test_positive_scaling_preserves_logit_sign():
    assignment = np.array([1, 0, 1, 0])
    W = init_last_layer(assignment, 1)
    scores = torch.tensor([[0.3, 1.7, 2.2, 0.1]])
    base = concept_logits(scores, W)
    scaled = concept_logits(scores * 7.5, W)
    assert torch.equal(torch.sign(base), torch.sign(scaled))


# ---------------------------------------------------------------- backbone


def test_backbone_output_grid():
    backbone = ConvBackbone(BackboneConfig(feature_depth=32, param_seed=0))
    out = backbone(torch.rand(2, 3, 32, 32))
    assert out.shape == (2, 32, 4, 4)
    assert out.min() >= 0.0 and out.max() <= 1.0  # sigmoid add-on


def test_receptive_field_box():
    r0, c0, r1, c1 = receptive_field_box(0, 0, 32)
    assert (r0, c0) == (0, 0) and 0 < r1 <= 32 and 0 < c1 <= 32
    r0b, c0b, r1b, c1b = receptive_field_box(3, 3, 32)
    assert r1b == 32 and c1b == 32 and r0b > 0 and c0b > 0
    # centers advance by the cumulative stride (8 px for the small backbone)
    a = receptive_field_box(1, 1, 32)
    assert a[0] - r0 == 8 or a[0] == 0
