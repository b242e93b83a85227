"""Shared plumbing: seed derivation, content hashing, deterministic file I/O."""

import hashlib
import json
import pickle
from pathlib import Path

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """Derive a stable sub-seed from a master seed and a label path.

    All randomness in a run flows from one --seed; each consumer gets its own
    stream keyed by purpose so adding a consumer never shifts another one.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "big") % (2**63 - 1)


def content_hash(path) -> str:
    """sha256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    """sha256 of a JSON-serializable object in canonical form."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_json(path, obj) -> None:
    """Write JSON with a fixed layout so identical inputs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def save_pickle(path, obj) -> None:
    """Deterministic checkpoint container (plain pickle of numpy/python data).

    torch.save is avoided because its zip container is not guaranteed
    byte-stable; numpy arrays pickle reproducibly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        pickle.dump(obj, f, protocol=4)


def load_pickle(path):
    with open(path, "rb") as f:
        return pickle.load(f)


def state_to_numpy(module) -> dict:
    """torch state_dict -> {name: float64/raw numpy array}, insertion-ordered."""
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def numpy_to_state(module, arrays: dict) -> None:
    import torch

    state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)
