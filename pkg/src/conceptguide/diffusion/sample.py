"""Guided ancestral sampling and the image-grid renderer."""

import numpy as np
import torch
from PIL import Image

from ..util import derive_seed
from .embedding import GuidedCondition
from .train import from_model_space


def sample(model, table, cond: GuidedCondition, w_g: float, count: int, seed: int, schedule):
    """Draw `count` images guided by cond with scale w_g.

    Ancestral DDPM updates from t=T down to 1; the guided noise estimate is
    (1 + w_g) * eps_cond - w_g * eps_uncond. The unconditional branch is the
    zero concept vector and is not evaluated when w_g == 0. Returns images as
    (count, H, W, 3) float in [0, 1], clipped once at the end.
    """
    if w_g < 0:
        raise ValueError("guidance scale must be >= 0")
    if cond.K != table.K:
        raise ValueError(f"condition K={cond.K} does not match model K={table.K}")
    size = model.cfg.image_size
    rng = torch.Generator().manual_seed(derive_seed(seed, "sample"))

    c = torch.as_tensor(cond.c).unsqueeze(0)
    mask = torch.as_tensor(cond.mask).unsqueeze(0)
    with torch.no_grad():
        vec = table.select_batch(c, mask).repeat(count, 1).to(torch.get_default_dtype())
        zero_vec = torch.zeros_like(vec)

        x = torch.randn((count, 3, size, size), generator=rng)
        for t in range(schedule.T, 0, -1):
            tt = torch.full((count,), float(t))
            eps = model(x, tt, vec)
            if w_g > 0:
                eps_uncond = model(x, tt, zero_vec)
                eps = (1.0 + w_g) * eps - w_g * eps_uncond
            alpha = schedule.alpha(t)
            abar = schedule.alpha_bar(t)
            x = (x - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps) / np.sqrt(alpha)
            if t > 1:
                z = torch.randn(x.shape, generator=rng)
                x = x + np.sqrt(schedule.beta(t)) * z
        out = from_model_space(x).clamp(0.0, 1.0)
    return out.permute(0, 2, 3, 1).numpy()


def render_grid(images, rows: int, cols: int, path, gutter: int = 2):
    """Write a rows x cols PNG grid (row-major) with fixed 2px gutters."""
    images = np.asarray(images)
    if len(images) != rows * cols:
        raise ValueError(f"got {len(images)} images for a {rows}x{cols} grid")
    H, W = images.shape[1:3]
    canvas = np.ones(
        (rows * H + (rows - 1) * gutter, cols * W + (cols - 1) * gutter, 3), dtype=np.float64
    )
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = r * (H + gutter), c * (W + gutter)
        canvas[y : y + H, x : x + W] = img
    arr = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)
    from pathlib import Path as _P

    _P(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    return path
