"""Shared fixtures for the trainer, CLI and acceptance tests."""
import numpy as np
from PIL import Image

from ursct.data import ImagePair, to_bytes
from ursct.gradcheck import tiny_config
from ursct.losses import LossWeights
from ursct.trainer import TrainConfig


def overfit_pair(size=64):
    """A smooth reference and a colour-cast, noisy raw version of it."""
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    ref = np.stack([0.2 + 0.6 * xx, 0.3 + 0.4 * yy, 0.5 + 0.3 * np.sin(6 * xx) * np.cos(4 * yy)]).astype(np.float32)
    cast = np.array([0.4, 0.8, 1.0])[:, None, None]
    raw = np.clip(ref * cast + 0.1 + 0.03 * rng.standard_normal(ref.shape), 0, 1).astype(np.float32)
    return ImagePair(raw, ref, "overfit")


def random_pairs(n, seed=0, size=64):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        ref = rng.uniform(0.1, 0.9, (3, size, size)).astype(np.float32)
        raw = np.clip(0.7 * ref + 0.1, 0, 1).astype(np.float32)
        pairs.append(ImagePair(raw, ref, f"img{i}"))
    return pairs


def tiny_train_config(**kw):
    model_kw = kw.pop("model_kw", {})
    base = dict(
        model=tiny_config(**model_kw),
        loss=LossWeights(ms_ssim_scales=3),
        epochs=4,
        warmup_epochs=1,
        batch_size=2,
        checkpoint_every=2,
    )
    base.update(kw)
    return TrainConfig(**base)


def write_dataset(root, pairs):
    """Write pairs as PNGs under ``root/raw`` and ``root/reference``."""
    (root / "raw").mkdir(parents=True, exist_ok=True)
    (root / "reference").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        Image.fromarray(to_bytes(p.raw)).save(root / "raw" / f"{p.id}.png")
        Image.fromarray(to_bytes(p.reference)).save(root / "reference" / f"{p.id}.png")
    return root


def synthetic_images(size=16):
    """Five small test images covering noise, ramps, saturated colour, dark pixels and flat blocks."""
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    noise = rng.uniform(0, 1, (3, size, size))
    ramps = np.stack([xx, yy, 0.5 * (xx + yy)])
    underwater = np.clip(np.stack([0.1 + 0.2 * xx, 0.4 + 0.3 * yy, 0.6 + 0.3 * xx * yy]) + 0.05 * rng.standard_normal((3, size, size)), 0, 1)
    dark = rng.uniform(0, 1, (3, size, size)) * (rng.uniform(0, 1, (1, size, size)) > 0.3)
    checker = np.broadcast_to((((yy * (size - 1)) // 4 + (xx * (size - 1)) // 4) % 2) * 0.8 + 0.1, (3, size, size)).copy()
    checker[0] *= 0.5
    return {"noise": noise, "ramps": ramps, "underwater": underwater, "dark": dark, "checker": checker}


def identity_qkv(attn):
    """Make Q = K = V = input tokens for the origin / conv_type1 variants."""
    c = attn.dim
    triple = np.concatenate([np.eye(c)] * 3)
    if attn.variant == "conv_type1":
        attn.qkv_channel.weight.data = triple[:, :, None, None].astype(attn.qkv_channel.weight.dtype)
        attn.qkv_channel.bias.data[:] = 0
        delta = np.zeros((3 * c, 1, 3, 3))
        delta[:, 0, 1, 1] = 1.0
        attn.qkv_spatial.weight.data = delta.astype(attn.qkv_spatial.weight.dtype)
        attn.qkv_spatial.bias.data[:] = 0
    else:
        attn.qkv.weight.data = triple.astype(attn.qkv.weight.dtype)
        attn.qkv.bias.data[:] = 0
