"""Reconstruction scoring: MSE, PSNR, SSIM, recovery rate, report emission."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import as_f64

GRAY = 0.0  # mid-gray placeholder in [-1, 1] for unrecovered patches


def patch_mse(a, b) -> float:
    a, b = as_f64(a), as_f64(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 2.0) -> float:
    """10 log10(peak^2 / MSE); +inf for identical inputs."""
    mse = patch_mse(a, b)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _windows(img: np.ndarray, win: int):
    h, w = img.shape
    for y in range(h - win + 1):
        for x in range(w - win + 1):
            yield img[y : y + win, x : x + win]


def ssim(a, b, window: int = 8, data_range: float = 2.0) -> float:
    """Uniform-window SSIM averaged over channels and window positions.

    Accepts (C, H, W) or (H, W) arrays; the window shrinks to the image if
    needed so small patches still score.
    """
    a, b = as_f64(a), as_f64(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = min(window, a.shape[-2], a.shape[-1])
    vals = []
    for ch in range(a.shape[0]):
        for wa, wb in zip(_windows(a[ch], win), _windows(b[ch], win)):
            mu_a, mu_b = wa.mean(), wb.mean()
            var_a, var_b = wa.var(), wb.var()
            cov = ((wa - mu_a) * (wb - mu_b)).mean()
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
            vals.append(num / den)
    return float(np.mean(vals))


@dataclass
class ScoreReport:
    per_patch_mse: list[float]
    mean_mse: float
    std_mse: float
    mean_ssim: float
    std_ssim: float
    psnr_db: float
    recovery_rate: float
    n_target_patches: int


def score_reconstruction(recovered: dict[tuple[int, int], np.ndarray],
                         truth: np.ndarray, p: int, c: int,
                         threshold_mse: float = 0.05) -> ScoreReport:
    """Score recovered patches against ground truth with gray placeholders.

    ``recovered`` maps (image, position) to a clamped pixel vector; ``truth``
    is the (M, N, P^2 C) ground-truth patch array. Every target patch
    contributes to the means, recovered or not.
    """
    m, n, _ = truth.shape
    mses, ssims, hits = [], [], 0
    for i in range(m):
        for t in range(1, n + 1):
            got = recovered.get((i, t))
            ref = truth[i, t - 1]
            cand = np.full_like(ref, GRAY) if got is None else np.clip(got, -1, 1)
            mse = patch_mse(cand, ref)
            mses.append(mse)
            shaped_a = cand.reshape(c, p, p)
            shaped_b = ref.reshape(c, p, p)
            ssims.append(ssim(shaped_a, shaped_b))
            if got is not None and mse < threshold_mse:
                hits += 1
    mean_mse = float(np.mean(mses))
    return ScoreReport(
        per_patch_mse=mses,
        mean_mse=mean_mse,
        std_mse=float(np.std(mses)),
        mean_ssim=float(np.mean(ssims)),
        std_ssim=float(np.std(ssims)),
        psnr_db=math.inf if mean_mse == 0 else 10.0 * math.log10(4.0 / mean_mse),
        recovery_rate=hits / (m * n),
        n_target_patches=m * n,
    )


def recovery_rate(recovered: dict[tuple[int, int], np.ndarray],
                  truth: np.ndarray, threshold_mse: float = 0.05) -> float:
    """Fraction of ground-truth patches with a valid match below the threshold."""
    m, n, _ = truth.shape
    hits = 0
    for (i, t), pix in recovered.items():
        if patch_mse(np.clip(pix, -1, 1), truth[i, t - 1]) < threshold_mse:
            hits += 1
    return hits / (m * n)


def fmt(x) -> str:
    """Deterministic scalar formatting for CSV/JSON output."""
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(x)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_json(path, payload: dict) -> None:
    with open(path, "w", newline="\n") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
