"""PSNR, windowed SSIM, token exact-match, and the plain-text metric report."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

PSNR_CLAMP = 99.0
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, max_val=1.0):
    """10*log10(max^2 / MSE); identical images clamp to 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CLAMP
    return min(PSNR_CLAMP, 10.0 * np.log10(max_val * max_val / mse))


def _to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def ssim(a, b, window=SSIM_WINDOW, k1=SSIM_K1, k2=SSIM_K2, max_val=1.0):
    """Mean SSIM over non-overlapping window x window tiles (grayscale)."""
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch: {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    if h < window or w < window:
        raise ValueError("image smaller than the SSIM window")
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    th, tw = h // window, w // window
    wa = ga[: th * window, : tw * window].reshape(th, window, tw, window)
    wb = gb[: th * window, : tw * window].reshape(th, window, tw, window)
    wa = wa.transpose(0, 2, 1, 3).reshape(-1, window * window)
    wb = wb.transpose(0, 2, 1, 3).reshape(-1, window * window)
    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    var_a = wa.var(axis=1)
    var_b = wb.var(axis=1)
    cov = ((wa - mu_a[:, None]) * (wb - mu_b[:, None])).mean(axis=1)
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
            ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(score.mean())


def exact_match(pred_grids, gt_grids):
    """Fraction of token positions with identical codes across all grids."""
    if len(pred_grids) != len(gt_grids):
        raise ValueError("grid count mismatch")
    total = hits = 0
    for p, g in zip(pred_grids, gt_grids):
        if (p.h, p.w) != (g.h, g.w):
            raise ValueError("grid extent mismatch")
        hits += int(np.sum(p.codes == g.codes))
        total += p.codes.size
    return hits / total


def config_fingerprint(*dicts):
    blob = json.dumps(list(dicts), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class VariantMetrics:
    psnr_per_view: list
    ssim_per_view: list
    psnr: float
    ssim: float
    exact_match: float


@dataclass
class MetricReport:
    experiment: str
    fingerprint: str
    variants: dict = field(default_factory=dict)   # name -> VariantMetrics

    def to_text(self):
        lines = [f"experiment {self.experiment}",
                 f"fingerprint {self.fingerprint}"]
        for name in sorted(self.variants):
            v = self.variants[name]
            ppv = ",".join(f"{x:.17g}" for x in v.psnr_per_view)
            spv = ",".join(f"{x:.17g}" for x in v.ssim_per_view)
            lines.append(
                f"variant {name} psnr {v.psnr:.17g} ssim {v.ssim:.17g} "
                f"exact_match {v.exact_match:.17g} "
                f"psnr_per_view {ppv} ssim_per_view {spv}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text):
        lines = [ln for ln in text.strip().splitlines() if ln]
        report = MetricReport(lines[0].split(" ", 1)[1],
                              lines[1].split(" ", 1)[1])
        for ln in lines[2:]:
            parts = ln.split()
            name = parts[1]
            kv = dict(zip(parts[2::2], parts[3::2]))
            report.variants[name] = VariantMetrics(
                [float(x) for x in kv["psnr_per_view"].split(",")],
                [float(x) for x in kv["ssim_per_view"].split(",")],
                float(kv["psnr"]), float(kv["ssim"]),
                float(kv["exact_match"]))
        return report
