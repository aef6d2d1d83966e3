"""Image quality metrics.

Full-reference: PSNR, SSIM (on BT.601 luminance), MS-SSIM (RGB).
No-reference: UIQM (colourfulness, sharpness, contrast) and UCIQE
(chroma spread, luminance contrast, saturation).

Images are channel-first ``(3, H, W)`` arrays with values in [0, 1].
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import ndimage

from . import losses
from .errors import DataError, DimensionError
from .tensor import Tensor, no_grad

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
UIQM_COEFFS = (0.0282, 0.2953, 3.5753)
UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)
UICM_ALPHA = 0.1
BLOCK = 8
PLIP_GAMMA = 1026.0
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
CSV_COLUMNS = ("psnr", "ssim", "ms_ssim", "uiqm", "uciqe")


def _chw(img) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a (3,H,W) image, got shape {arr.shape}")
    return arr.astype(np.float64)


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p, t = _chw(pred), _chw(target)
    if p.shape != t.shape:
        raise DimensionError(f"image shapes differ: {p.shape} vs {t.shape}")
    return p, t


# ---------------------------------------------------------------------------
# full reference


def psnr(pred, target, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``PSNR_CAP``."""
    p, t = _pair(pred, target)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val**2 / mse))


def ssim(pred, target, luminance: bool = True) -> float:
    """Mean SSIM (Gaussian window 11, sigma 1.5, K1=0.01, K2=0.03, range 1).

    Computed on BT.601 luminance by default, otherwise on each RGB channel
    and averaged.
    """
    p, t = _pair(pred, target)
    if luminance:
        p = np.tensordot(LUMA, p, axes=1)[None]
        t = np.tensordot(LUMA, t, axes=1)[None]
    with no_grad():
        val, _ = losses.ssim_components(Tensor(p[None]), Tensor(t[None]))
    return float(val.data.mean())


def ms_ssim_metric(pred, target, scales: int = 5) -> float:
    p, t = _pair(pred, target)
    with no_grad():
        return losses.ms_ssim(Tensor(p[None]), Tensor(t[None]), scales).item()


# ---------------------------------------------------------------------------
# UIQM


def _trimmed_mean(x: np.ndarray, alpha: float = UICM_ALPHA) -> float:
    xs = np.sort(x, axis=None)
    k = xs.size
    lo, hi = math.ceil(alpha * k), math.floor(alpha * k)
    return float(xs[lo : k - hi].mean())


def uicm(rgb255: np.ndarray) -> float:
    """Colourfulness from asymmetric alpha-trimmed opponent-channel statistics."""
    r, g, b = rgb255
    rg = r - g
    yb = (r + g) / 2.0 - b
    mu_rg, mu_yb = _trimmed_mean(rg), _trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * math.sqrt(mu_rg**2 + mu_yb**2) + 0.1586 * math.sqrt(var_rg + var_yb)


def _blocks(ch: np.ndarray, size: int = BLOCK) -> np.ndarray:
    """(k1*k2, size*size) view of the full blocks; partial trailing blocks are dropped."""
    k1, k2 = ch.shape[0] // size, ch.shape[1] // size
    if k1 == 0 or k2 == 0:
        raise DimensionError(f"image {ch.shape} smaller than one {size}x{size} block")
    ch = ch[: k1 * size, : k2 * size]
    return ch.reshape(k1, size, k2, size).transpose(0, 2, 1, 3).reshape(k1 * k2, size * size)


def eme(ch: np.ndarray, size: int = BLOCK) -> float:
    """2/(k1 k2) * sum log(max/min) over blocks; blocks with a zero extreme add 0."""
    blk = _blocks(ch, size)
    lo, hi = blk.min(axis=1), blk.max(axis=1)
    ok = (lo > 0) & (hi > 0)
    return 2.0 * float(np.log(hi[ok] / lo[ok]).sum()) / blk.shape[0]


def uism(rgb255: np.ndarray) -> float:
    """Luminance-weighted EME of the Sobel edge maps (edge magnitude x channel)."""
    total = 0.0
    for weight, ch in zip(LUMA, rgb255):
        mag = np.hypot(ndimage.sobel(ch, axis=0, mode="reflect"), ndimage.sobel(ch, axis=1, mode="reflect"))
        total += weight * eme(ch * mag)
    return float(total)


def uiconm(rgb255: np.ndarray, size: int = BLOCK) -> float:
    """Log-AMEE contrast of the luminance image using PLIP difference and sum."""
    gray = np.tensordot(LUMA, rgb255, axes=1)
    blk = _blocks(gray, size)
    hi, lo = blk.max(axis=1), blk.min(axis=1)
    diff = PLIP_GAMMA * (hi - lo) / (PLIP_GAMMA - lo)
    summ = hi + lo - hi * lo / PLIP_GAMMA
    ok = (diff != 0) & (summ != 0)
    m = diff[ok] / summ[ok]
    return float(-(m * np.log(m)).sum() / blk.shape[0])


def uiqm_components(img) -> dict[str, float]:
    rgb255 = np.clip(_chw(img), 0.0, 1.0) * 255.0
    parts = {"uicm": uicm(rgb255), "uism": uism(rgb255), "uiconm": uiconm(rgb255)}
    c1, c2, c3 = UIQM_COEFFS
    parts["uiqm"] = c1 * parts["uicm"] + c2 * parts["uism"] + c3 * parts["uiconm"]
    return parts


def uiqm(img) -> float:
    return uiqm_components(img)["uiqm"]


# ---------------------------------------------------------------------------
# UCIQE


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """(3,H,W) sRGB in [0,1] -> (3,H,W) CIELab, D65 white taken as the image of RGB white."""
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.tensordot(SRGB_TO_XYZ, linear, axes=1)
    white = SRGB_TO_XYZ.sum(axis=1)
    t = xyz / white[:, None, None]
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    return np.stack([116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])])


def uciqe_components(img) -> dict[str, float]:
    """Chroma std, 1-99 percentile lightness spread and mean saturation.

    Lightness and chroma are divided by 100; saturation is chroma/lightness
    and counts as 0 where lightness is 0.
    """
    lab = srgb_to_lab(np.clip(_chw(img), 0.0, 1.0))
    lum, a, b = lab
    chroma = np.sqrt(a * a + b * b)
    sat = np.divide(chroma, lum, out=np.zeros_like(chroma), where=lum != 0)
    parts = {
        "sigma_chroma": float(np.std(chroma / 100.0)),
        "con_lum": float(np.percentile(lum / 100.0, 99) - np.percentile(lum / 100.0, 1)),
        "mu_sat": float(sat.mean()),
    }
    c1, c2, c3 = UCIQE_COEFFS
    parts["uciqe"] = c1 * parts["sigma_chroma"] + c2 * parts["con_lum"] + c3 * parts["mu_sat"]
    return parts


def uciqe(img) -> float:
    return uciqe_components(img)["uciqe"]


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class MetricReport:
    rows: list[tuple[str, dict[str, float]]] = field(default_factory=list)

    def add(self, image_id: str, values: dict[str, float]) -> None:
        self.rows.append((image_id, dict(values)))

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, values in self.rows:
            for k in values:
                out[k] = out.get(k, 0) + 1
        return out

    @property
    def means(self) -> dict[str, float]:
        sums: dict[str, float] = {}
        for _, values in self.rows:
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
        return {k: sums[k] / n for k, n in self.counts.items()}

    def to_csv(self, path: str | Path) -> None:
        def fmt(values, key):
            return "" if key not in values else f"{values[key]:.6f}"

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("image",) + CSV_COLUMNS)
            for image_id, values in self.rows:
                writer.writerow([image_id] + [fmt(values, k) for k in CSV_COLUMNS])
            means = self.means
            writer.writerow(["MEAN"] + [fmt(means, k) for k in CSV_COLUMNS])


def full_reference_metrics(pred, target, ms_ssim_scales: int = 5) -> dict[str, float]:
    p, t = _pair(pred, target)
    values = {"psnr": psnr(p, t), "ssim": ssim(p, t)}
    try:
        losses.check_ms_ssim_size(p.shape[1], p.shape[2], ms_ssim_scales)
    except Exception:
        return values
    values["ms_ssim"] = ms_ssim_metric(p, t, ms_ssim_scales)
    return values


def no_reference_metrics(img) -> dict[str, float]:
    return {"uiqm": uiqm(img), "uciqe": uciqe(img)}


def enhance(model: Callable[[Tensor], Tensor], raw: np.ndarray) -> np.ndarray:
    """Run ``model`` on a single (3,H,W) image and return the clamped result."""
    with no_grad():
        out = model(Tensor(raw[None].astype(np.float32)))
    return np.clip(out.data[0], 0.0, 1.0)


def evaluate_dataset(model, pairs: Iterable, mode: str = "full_reference", ms_ssim_scales: int = 5) -> MetricReport:
    """Enhance each ``ImagePair`` with ``model`` and score it.

    ``mode`` is ``full_reference`` (PSNR, SSIM, MS-SSIM against the
    reference) or ``no_reference`` (UIQM, UCIQE of the output).
    """
    if mode not in ("full_reference", "no_reference"):
        raise DataError(f"unknown evaluation mode {mode!r}")
    pairs = list(pairs)
    if not pairs:
        raise DataError("cannot evaluate an empty dataset")
    if mode == "full_reference":
        missing = [p.id for p in pairs if p.reference is None]
        if missing:
            raise DataError(f"full-reference evaluation needs references; missing for {missing}")
    report = MetricReport()
    for pair in pairs:
        out = enhance(model, pair.raw)
        if mode == "full_reference":
            report.add(pair.id, full_reference_metrics(out, pair.reference, ms_ssim_scales))
        else:
            report.add(pair.id, no_reference_metrics(out))
    return report
