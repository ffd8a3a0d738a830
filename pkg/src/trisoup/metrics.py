"""Evaluation metrics: PSNR, SSIM and Chamfer distance."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .losses import ssim

PSNR_CAP = 99.0


def psnr(img, ref) -> float:
    img = np.asarray(img, float)
    ref = np.asarray(ref, float)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def chamfer(a, b) -> tuple[float, float, float]:
    """(accuracy, completeness, mean) with exact nearest neighbours."""
    a = np.asarray(a, float).reshape(-1, 3)
    b = np.asarray(b, float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    acc = float(cKDTree(b).query(a)[0].mean())
    comp = float(cKDTree(a).query(b)[0].mean())
    return acc, comp, 0.5 * (acc + comp)


__all__ = ["psnr", "ssim", "chamfer", "PSNR_CAP"]
