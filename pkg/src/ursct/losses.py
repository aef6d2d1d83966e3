"""Training objective: Charbonnier + gradient-map L1 + (1 - MS-SSIM), weighted."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor, no_grad

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03
WIN_SIZE, WIN_SIGMA = 11, 1.5
# Floor applied to per-scale terms before the fractional power.
_POW_FLOOR = 1e-8


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 2.0
    epsilon: float = 1e-3
    ms_ssim_scales: int = 5
    gradient_operator: str = "forward"

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 1 <= self.ms_ssim_scales <= len(MS_SSIM_WEIGHTS):
            raise ConfigError(f"ms_ssim_scales must be in 1..{len(MS_SSIM_WEIGHTS)}")
        if self.gradient_operator not in ("forward", "sobel"):
            raise ConfigError(f"gradient_operator must be 'forward' or 'sobel', got {self.gradient_operator!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=like.dtype))


def charbonnier(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    _same_shape(pred, target)
    d = pred - target
    return T.sqrt(d * d + eps * eps).mean()


def _sobel_kernels(channels: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    kx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    wx = np.broadcast_to(kx, (channels, 1, 3, 3)).astype(dtype)
    wy = np.broadcast_to(kx.T, (channels, 1, 3, 3)).astype(dtype)
    return wx, wy


def gradient_map(img: Tensor, operator: str = "forward") -> tuple[Tensor, Tensor]:
    """Horizontal and vertical gradient maps of a (B,C,H,W) image.

    ``forward``: ``Gx[i,j] = I[i,j+1] - I[i,j]`` with a zero last column, and
    likewise ``Gy`` along rows. ``sobel``: 3x3 Sobel responses with
    edge-replicated borders, so constant images map to zero everywhere.
    """
    if img.ndim != 4:
        raise DimensionError(f"expected (B,C,H,W), got {img.shape}")
    if operator not in ("forward", "sobel"):
        raise ConfigError(f"unknown gradient operator {operator!r}")
    b, c, h, w = img.shape
    if operator == "sobel":
        wx, wy = _sobel_kernels(c, img.dtype)
        padded = T.concat([img[:, :, :1], img, img[:, :, -1:]], axis=2)
        padded = T.concat([padded[:, :, :, :1], padded, padded[:, :, :, -1:]], axis=3)
        return T.conv2d(padded, Tensor(wx), groups=c), T.conv2d(padded, Tensor(wy), groups=c)
    gx = T.concat([img[:, :, :, 1:] - img[:, :, :, :-1], _const(np.zeros((b, c, h, 1)), img)], axis=3)
    gy = T.concat([img[:, :, 1:, :] - img[:, :, :-1, :], _const(np.zeros((b, c, 1, w)), img)], axis=2)
    return gx, gy


def gradient_loss(pred: Tensor, target: Tensor, operator: str = "forward") -> Tensor:
    """Mean |grad(pred) - grad(target)|, averaged over the two directions."""
    _same_shape(pred, target)
    pgx, pgy = gradient_map(pred, operator)
    tgx, tgy = gradient_map(target, operator)
    return (T.absolute(pgx - tgx).mean() + T.absolute(pgy - tgy).mean()) * 0.5


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: Tensor, g: np.ndarray) -> Tensor:
    """Separable 'valid' Gaussian filtering of each channel."""
    c = x.shape[1]
    kw = Tensor(np.broadcast_to(g, (c, 1, 1, g.size)).astype(x.dtype))
    kh = Tensor(np.broadcast_to(g[:, None], (c, 1, g.size, 1)).astype(x.dtype))
    return T.conv2d(T.conv2d(x, kw, groups=c), kh, groups=c)


def ssim_components(x: Tensor, y: Tensor, data_range: float = 1.0, win: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Per-(batch, channel) mean SSIM and mean contrast-structure term, each (B, C)."""
    g = gaussian_window() if win is None else win
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = _filter(x, g), _filter(y, g)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = _filter(x * x, g) - mu_xx
    s_yy = _filter(y * y, g) - mu_yy
    s_xy = _filter(x * y, g) - mu_xy
    cs_map = (s_xy * 2.0 + c2) / (s_xx + s_yy + c2)
    ssim_map = (mu_xy * 2.0 + c1) / (mu_xx + mu_yy + c1) * cs_map
    return ssim_map.mean(axis=(2, 3)), cs_map.mean(axis=(2, 3))


def _avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    x = x[:, :, : h - h % 2, : w - w % 2]
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def check_ms_ssim_size(h: int, w: int, scales: int, win_size: int = WIN_SIZE) -> None:
    for _ in range(scales - 1):
        h, w = h // 2, w // 2
    if min(h, w) < win_size:
        raise ConfigError(
            f"image too small for {scales}-scale MS-SSIM (coarsest scale {h}x{w} < window {win_size}); "
            "use fewer scales"
        )


def ms_ssim(x: Tensor, y: Tensor, scales: int = 5, data_range: float = 1.0) -> Tensor:
    """Multi-scale SSIM of two (B,C,H,W) batches, averaged over batch and channels.

    Uses the first ``scales`` standard level weights, renormalized to sum to
    one when fewer than five scales are requested. Per-scale terms are floored
    at a tiny positive value before exponentiation, so the result lies in
    [0, 1].
    """
    _same_shape(x, y)
    if x.ndim != 4:
        raise DimensionError(f"expected (B,C,H,W), got {x.shape}")
    check_ms_ssim_size(x.shape[2], x.shape[3], scales)
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    result = None
    for i in range(scales):
        ssim_val, cs_val = ssim_components(x, y, data_range)
        term = ssim_val if i == scales - 1 else cs_val
        term = T.power(T.clamp(term, _POW_FLOOR, None), float(weights[i]))
        result = term if result is None else result * term
        if i < scales - 1:
            x, y = _avg_pool2(x), _avg_pool2(y)
    return result.mean()


def ms_ssim_loss(pred: Tensor, target: Tensor, scales: int = 5) -> Tensor:
    return 1.0 - ms_ssim(pred, target, scales)


def total_loss(pred: Tensor, target: Tensor, w: LossWeights | None = None) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective and its components ``L_C``, ``L_gd``, ``L_M``, ``L_sum``.

    Components with zero weight are still evaluated for logging, outside the
    gradient graph.
    """
    w = w or LossWeights()
    _same_shape(pred, target)
    terms = (
        ("L_C", w.w1, lambda: charbonnier(pred, target, w.epsilon)),
        ("L_gd", w.w2, lambda: gradient_loss(pred, target, w.gradient_operator)),
        ("L_M", w.w3, lambda: ms_ssim_loss(pred, target, w.ms_ssim_scales)),
    )
    total = None
    parts: dict[str, float] = {}
    for name, weight, fn in terms:
        if weight == 0:
            with no_grad():
                parts[name] = fn().item()
            continue
        value = fn()
        parts[name] = value.item()
        total = value * weight if total is None else total + value * weight
    if total is None:
        total = (pred - pred.detach()).sum() * 0.0
    parts["L_sum"] = total.item()
    return total, parts
