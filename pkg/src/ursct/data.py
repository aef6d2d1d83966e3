"""Image loading, resizing and paired raw/reference dataset indexing.

Directory convention: ``<root>/raw/*.png|jpg`` and optionally
``<root>/reference/*.png|jpg``; files pair up by identical filename stem.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import DataError, FileIOError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class ImagePair:
    raw: np.ndarray
    reference: np.ndarray | None
    id: str


@dataclass
class DatasetIndex:
    entries: list[tuple[Path, Path | None]]
    size: tuple[int, int]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ImagePair]:
        for i in range(len(self)):
            yield self.load(i)

    @property
    def has_references(self) -> bool:
        return all(ref is not None for _, ref in self.entries)

    def load(self, i: int) -> ImagePair:
        raw_path, ref_path = self.entries[i]
        h, w = self.size
        raw = resize_bilinear(load_image(raw_path), h, w)
        ref = None if ref_path is None else resize_bilinear(load_image(ref_path), h, w)
        return ImagePair(raw=raw, reference=ref, id=raw_path.stem)


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit image to a (3,H,W) float32 array of ``byte / 255``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L", "RGBA", "P"):
                raise FileIOError(f"{path}: unsupported image mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileIOError:
        raise
    except (OSError, ValueError) as exc:
        raise FileIOError(f"{path}: cannot read image ({exc})") from None
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def to_bytes(t: np.ndarray) -> np.ndarray:
    """(3,H,W) values -> (H,W,3) uint8 via clamp then round-half-up of v*255."""
    arr = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_image(t: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    arr = np.asarray(getattr(t, "data", t))
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"save_image expects (3,H,W), got {arr.shape}")
    try:
        Image.fromarray(to_bytes(arr), mode="RGB").save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise FileIOError(f"{path}: cannot write image ({exc})") from None


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(t: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a (C,H,W) array with the half-pixel-centre convention."""
    c, h0, w0 = t.shape
    if (h0, w0) == (h, w):
        return t.copy()
    r0, r1, fr = _interp_axis(h0, h)
    c0, c1, fc = _interp_axis(w0, w)
    fr = fr.astype(t.dtype)[:, None]
    fc = fc.astype(t.dtype)[None, :]
    top = t[:, r0][:, :, c0] * (1 - fc) + t[:, r0][:, :, c1] * fc
    bottom = t[:, r1][:, :, c0] * (1 - fc) + t[:, r1][:, :, c1] * fc
    return (top * (1 - fr) + bottom * fr).astype(t.dtype)


def _images_by_stem(directory: Path) -> dict[str, Path]:
    found: dict[str, list[Path]] = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            found.setdefault(p.stem, []).append(p)
    dupes = sorted(stem for stem, paths in found.items() if len(paths) > 1)
    if dupes:
        raise DataError(f"duplicate image stems in {directory}: {', '.join(dupes)}")
    return {stem: paths[0] for stem, paths in found.items()}


def scan_paired_dataset(
    raw_dir: str | Path,
    ref_dir: str | Path | None = None,
    size: tuple[int, int] = (256, 256),
    require_reference: bool | None = None,
) -> DatasetIndex:
    """Index raw images, pairing them with references by filename stem.

    With ``require_reference`` (the default whenever ``ref_dir`` is given) an
    unmatched raw stem is an error; otherwise it is kept without reference.
    """
    raw_dir = Path(raw_dir)
    if not raw_dir.is_dir():
        raise DataError(f"raw directory not found: {raw_dir}")
    raws = _images_by_stem(raw_dir)
    if not raws:
        raise DataError(f"no images in {raw_dir}")
    if require_reference is None:
        require_reference = ref_dir is not None
    refs: dict[str, Path] = {}
    if ref_dir is not None:
        ref_dir = Path(ref_dir)
        if not ref_dir.is_dir():
            raise DataError(f"reference directory not found: {ref_dir}")
        refs = _images_by_stem(ref_dir)
    elif require_reference:
        raise DataError("full-reference mode needs a reference directory")
    unmatched = [s for s in sorted(raws) if s not in refs]
    if require_reference and unmatched:
        raise DataError(f"raw images without reference: {', '.join(unmatched)}")
    entries = [(raws[s], refs.get(s)) for s in sorted(raws)]
    return DatasetIndex(entries=entries, size=(int(size[0]), int(size[1])))


def scan_dataset_root(root: str | Path, size: tuple[int, int], full_reference: bool) -> DatasetIndex:
    root = Path(root)
    ref_dir = root / "reference"
    return scan_paired_dataset(
        root / "raw",
        ref_dir if ref_dir.is_dir() else None,
        size,
        require_reference=full_reference,
    )


def batch_order(n: int, shuffle: bool, seed: int) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng(seed).permutation(n)


def make_batches(
    index: DatasetIndex,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    hflip: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray | None, list[str]]]:
    """Yield ``(raw, reference, ids)`` batches of shape (B,3,H,W).

    The order depends only on ``seed``; the final partial batch is kept.
    ``hflip`` mirrors each pair horizontally with probability 1/2 (same seed stream).
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = batch_order(len(index), shuffle, seed)
    flip_rng = np.random.default_rng([seed, 1]) if hflip else None
    for start in range(0, len(order), batch_size):
        pairs = [index.load(int(i)) for i in order[start : start + batch_size]]
        if flip_rng is not None:
            for p in pairs:
                if flip_rng.random() < 0.5:
                    p.raw = p.raw[:, :, ::-1].copy()
                    if p.reference is not None:
                        p.reference = p.reference[:, :, ::-1].copy()
        raw = np.stack([p.raw for p in pairs])
        ref = None if any(p.reference is None for p in pairs) else np.stack([p.reference for p in pairs])
        yield raw, ref, [p.id for p in pairs]
