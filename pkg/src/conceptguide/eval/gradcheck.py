"""Finite-difference verification of the four custom loss terms.

Each check compares the autograd gradient of the packaged implementation
against central differences (step 1e-4) in double precision on a fixed toy
instance. Failures are report entries, not exceptions, so a deliberately
broken implementation surfaces by name.
"""

import numpy as np
import torch

from ..proto.core import cluster_cost, separation_cost, squared_distances
from ..proto.ppool import orth_cross, orth_within
from ..util import derive_seed

REL_TOL = 1e-4
FD_STEP = 1e-4


def _central_diff(fn, x0):
    x = np.array(x0, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + FD_STEP
        hi = fn(x)
        flat[i] = keep - FD_STEP
        lo = fn(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * FD_STEP)
    return grad


def _dmin(patches, prototypes):
    rows = []
    for p in patches:
        pat = torch.as_tensor(p, dtype=torch.float64).unsqueeze(0)
        rows.append(squared_distances(pat, prototypes).min(dim=1).values[0])
    return torch.stack(rows)


def _check_cost(cost_fn, rng):
    # 2 images, K=2, D_f=3, 5 prototypes covering all four concept classes
    patches = [rng.normal(size=(3, 3)), rng.normal(size=(2, 3))]
    protos0 = rng.normal(size=(5, 3))
    assignment = np.array([0, 1, 2, 3, rng.integers(0, 4)])
    members = [np.flatnonzero(assignment == g) for g in range(4)]
    concepts = torch.as_tensor(rng.integers(0, 2, size=(2, 2)))

    P = torch.as_tensor(protos0, dtype=torch.float64).requires_grad_(True)
    loss = cost_fn(_dmin(patches, P), members, concepts)
    loss.backward()
    analytic = P.grad.numpy()

    def value(arr):
        return float(cost_fn(_dmin(patches, torch.as_tensor(arr, dtype=torch.float64)), members, concepts))

    fd = _central_diff(value, protos0)
    denom = max(np.abs(fd).max(), 1e-10)
    return float(np.abs(analytic - fd).max() / denom)


def gradcheck_suite(seed: int = 0, impls=None):
    """Run all four checks; returns a deterministic pass/fail report dict.

    `impls` may override any of {"clst", "sep", "orth_p", "orth_c"} with an
    alternative implementation (used to prove the harness catches breakage).
    """
    impls = impls or {}
    checks = {
        "clst": lambda rng: _check_cost(impls.get("clst", cluster_cost), rng),
        "sep": lambda rng: _check_cost(impls.get("sep", separation_cost), rng),
        "orth_p": lambda rng: _check_orth_with(impls, "orth_p", rng),
        "orth_c": lambda rng: _check_orth_with(impls, "orth_c", rng),
    }
    report = {"seed": seed, "rel_tol": REL_TOL, "terms": {}, "passed": True}
    for name, runner in checks.items():
        rng = np.random.default_rng(derive_seed(seed, "gradcheck", name))
        rel_err = runner(rng)
        ok = bool(rel_err < REL_TOL)
        report["terms"][name] = {"max_rel_err": rel_err, "passed": ok}
        report["passed"] = report["passed"] and ok
    return report


def _check_orth_with(impls, which, rng):
    q0 = rng.normal(size=(3, 4))
    q_other = torch.as_tensor(rng.normal(size=(3, 4)), dtype=torch.float64)
    fn = impls.get(which)
    if fn is None:
        fn = orth_within if which == "orth_p" else orth_cross

    def call(q):
        return fn(q) if which == "orth_p" else fn(q, q_other)

    q = torch.as_tensor(q0, dtype=torch.float64).requires_grad_(True)
    call(q).backward()
    analytic = q.grad.numpy()
    fd = _central_diff(lambda arr: float(call(torch.as_tensor(arr, dtype=torch.float64))), q0)
    denom = max(np.abs(fd).max(), 1e-10)
    return float(np.abs(analytic - fd).max() / denom)
