"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    probes: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<28} max_rel_err={self.max_rel_err:.3e}  tol={self.tol:.0e}  {status}"


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * Tensor(weights)).sum()


def finite_diff_gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    probes: int = 10,
    seed: int = 0,
    name: str = "op",
    mode: str = "direction",
) -> GradcheckReport:
    """Compare backward() against central differences ``(f(x+h d) - f(x-h d)) / 2h``.

    ``fn`` maps the input tensors to a tensor; non-scalar outputs are
    contracted with a fixed random weight so the whole Jacobian is exercised.
    Each probe is either a random unit direction across all inputs
    (``mode="direction"``) or a single random coordinate (``mode="coordinate"``).
    Inputs should be float64.
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = fn(*inputs)
    weights = None if out.size == 1 else rng.standard_normal(out.shape)
    _scalarize(out, weights).backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def f_at() -> float:
        with no_grad():
            return _scalarize(fn(*inputs), weights).item()

    max_rel = max_abs = 0.0
    for _ in range(probes):
        if mode == "coordinate":
            k = int(rng.integers(len(inputs)))
            d = [np.zeros_like(t.data) for t in inputs]
            d[k].reshape(-1)[int(rng.integers(inputs[k].size))] = 1.0
        else:
            d = [rng.standard_normal(t.shape) for t in inputs]
            norm = np.sqrt(sum(float((x * x).sum()) for x in d))
            d = [x / norm for x in d]
        analytic = sum(float((g * x).sum()) for g, x in zip(grads, d))
        originals = [t.data.copy() for t in inputs]
        for t, x in zip(inputs, d):
            t.data = originals[inputs.index(t)] + h * x
        f_plus = f_at()
        for t, x, o in zip(inputs, d, originals):
            t.data = o - h * x
        f_minus = f_at()
        for t, o in zip(inputs, originals):
            t.data = o
        numeric = (f_plus - f_minus) / (2 * h)
        err = abs(analytic - numeric)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / scale)
    return GradcheckReport(name, max_rel, max_abs, probes, tol)


OP_TOL = 1e-5
MODEL_TOL = 1e-4
SUITES = ("tensor", "model", "losses")


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def tensor_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    from . import tensor as T

    r = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    return [
        ("add (broadcast)", lambda a, b: a + b, [r((3, 4)), r((4,))]),
        ("sub (broadcast)", lambda a, b: a - b, [r((2, 3, 4)), r((3, 1))]),
        ("mul (broadcast)", lambda a, b: a * b, [r((3, 4)), r((3, 1))]),
        ("div", lambda a, b: a / b, [r((3, 4)), pos(3, 4)]),
        ("scale", lambda a: T.scale(a, -1.7), [r((5,))]),
        ("power", lambda a: T.power(a, 1.5), [pos(4, 3)]),
        ("sqrt", T.sqrt, [pos(6)]),
        ("exp", T.exp, [r((3, 3))]),
        ("log", T.log, [pos(3, 3)]),
        ("absolute", T.absolute, [_away_from_zero(rng, (4, 5))]),
        ("clamp", lambda a: T.clamp(a, -0.5, 0.5), [np.concatenate([_away_from_zero(rng, 6, 0.6) * 2, rng.uniform(-0.4, 0.4, 6)])]),
        ("gelu", T.gelu, [3 * r((4, 5))]),
        ("reduce_sum", lambda a: T.reduce_sum(a, axis=(0, 2), keepdims=True), [r((2, 3, 4))]),
        ("reduce_mean", lambda a: T.reduce_mean(a, axis=1), [r((2, 3, 4))]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [2 * r((3, 5))]),
        ("layer_norm", lambda a, g, b: T.layer_norm(a, g, b), [r((2, 3, 8)), 1 + 0.1 * r((8,)), 0.1 * r((8,))]),
        ("reshape", lambda a: T.reshape(a, (4, 6)), [r((2, 3, 4))]),
        ("permute", lambda a: T.permute(a, (2, 0, 1)), [r((2, 3, 4))]),
        ("roll", lambda a: T.roll(a, (-1, 2), (1, 2)), [r((2, 4, 5))]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r((2, 3)), r((2, 4))]),
        ("getitem", lambda a: a[:, 1:3, ::2], [r((2, 4, 6))]),
        ("getitem (fancy, repeated)", lambda a: T.getitem(a, (np.array([0, 2, 2, 1]),)), [r((3, 4))]),
        ("stack", lambda a, b: T.stack([a, b], axis=1), [r((2, 3)), r((2, 3))]),
        ("matmul (batched)", T.matmul, [r((2, 3, 4)), r((4, 5))]),
        ("linear", T.linear, [r((2, 3, 4)), r((5, 4)), r((5,))]),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, padding=1), [r((2, 3, 5, 6)), r((4, 3, 3, 3)), r((4,))]),
        ("conv2d (stride 2)", lambda x, w: T.conv2d(x, w, None, stride=2), [r((1, 3, 6, 6)), r((2, 3, 2, 2))]),
        ("conv2d (depthwise)", lambda x, w, b: T.conv2d(x, w, b, padding=1, groups=4), [r((2, 4, 5, 5)), r((4, 1, 3, 3)), r((4,))]),
        ("conv2d (grouped)", lambda x, w: T.conv2d(x, w, None, padding=1, groups=2), [r((1, 4, 4, 4)), r((6, 2, 3, 3))]),
    ]


def _module_case(module, fn):
    """Check a module's parameters directly by feeding them as extra inputs."""
    params = [p for _, p in module.named_parameters()]
    return (lambda x, *_: fn(x)), params


def model_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor], float]]:
    from .model import URSCT, Downsample, RSCTBlock, Upsample, WindowAttention, rsctb_pair

    cases = []
    f64 = np.float64
    for variant in ("origin", "conv_type1", "conv_type2"):
        attn = WindowAttention(8, 2, 4, variant, "sqrt_dim", np.random.default_rng(1), f64)
        run, ps = _module_case(attn, lambda x, a=attn: a(x, None))
        cases.append((f"window_attention[{variant}]", run, [Tensor(rng.standard_normal((2, 16, 8))), *ps], OP_TOL))

    cfg = tiny_config(dtype="float64")
    br = np.random.default_rng(2)
    plain = RSCTBlock(8, 2, 4, 0, cfg, br, use_mask=True)
    shifted = RSCTBlock(8, 2, 4, 2, cfg, br, use_mask=True)

    class _Pair:
        def named_parameters(self):
            yield from plain.named_parameters("a.")
            yield from shifted.named_parameters("b.")

    run, ps = _module_case(_Pair(), lambda z: rsctb_pair(plain, shifted, z))
    cases.append(("rsctb_pair (shift + mask)", run, [Tensor(rng.standard_normal((1, 8, 8, 8))), *ps], OP_TOL))

    down = Downsample(4, np.random.default_rng(3), f64)
    run, ps = _module_case(down, down)
    cases.append(("patch_merging", run, [Tensor(rng.standard_normal((2, 4, 6, 4))), *ps], OP_TOL))
    up = Upsample(8, 4, 2, np.random.default_rng(4), f64)
    run, ps = _module_case(up, up)
    cases.append(("upsample", run, [Tensor(rng.standard_normal((1, 3, 2, 8))), *ps], OP_TOL))

    tiny = URSCT(tiny_config(dtype="float64")).eval()
    run, ps = _module_case(tiny, lambda x: tiny(x, clamp=False))
    cases.append(("full tiny model", run, [Tensor(rng.uniform(0, 1, (1, 3, 64, 64))), *ps], MODEL_TOL))
    return cases


def loss_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    from .losses import LossWeights, charbonnier, gradient_loss, ms_ssim_loss, total_loss

    u = lambda *s: rng.uniform(0.05, 0.95, s)  # noqa: E731
    return [
        ("charbonnier", charbonnier, [u(2, 3, 8, 8), u(2, 3, 8, 8)]),
        ("gradient_loss (forward)", gradient_loss, [u(1, 3, 8, 8), u(1, 3, 8, 8)]),
        ("gradient_loss (sobel)", lambda a, b: gradient_loss(a, b, "sobel"), [u(1, 3, 8, 8), u(1, 3, 8, 8)]),
        ("ms_ssim_loss (3 scales)", lambda a, b: ms_ssim_loss(a, b, 3), [u(1, 3, 48, 48), u(1, 3, 48, 48)]),
        ("total_loss", lambda a, b: total_loss(a, b, LossWeights(ms_ssim_scales=3))[0], [u(1, 3, 48, 48), u(1, 3, 48, 48)]),
    ]


def tiny_config(**overrides):
    """The small configuration used by gradient, overfit and ablation checks."""
    from .model import ModelConfig

    kw = dict(image_size=(64, 64), patch_size=2, embed_dim=8, window_size=4, layer_depth=2, num_heads=2)
    kw.update(overrides)
    return ModelConfig(**kw)


def run_suite(module: str = "all", probes: int = 10, seed: int = 0) -> list[GradcheckReport]:
    """Finite-difference check of every registered op; all in float64."""
    if module not in SUITES + ("all",):
        raise ValueError(f"unknown gradcheck module {module!r}")
    wanted = SUITES if module == "all" else (module,)
    rng = np.random.default_rng(seed)
    reports = []
    if "tensor" in wanted:
        for name, fn, arrays in tensor_cases(rng):
            reports.append(finite_diff_gradcheck(fn, [Tensor(a) for a in arrays], tol=OP_TOL, probes=probes, seed=seed, name=name))
    if "model" in wanted:
        for name, fn, inputs, tol in model_cases(rng):
            reports.append(finite_diff_gradcheck(fn, inputs, tol=tol, probes=probes, seed=seed, name=name))
    if "losses" in wanted:
        for name, fn, arrays in loss_cases(rng):
            reports.append(finite_diff_gradcheck(fn, [Tensor(a) for a in arrays], tol=OP_TOL, probes=probes, seed=seed, name=name))
    return reports
