"""Module x loss-set ablation: train each cell from a shared seed and data, report PSNR/SSIM."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

from .data import scan_dataset_root
from .errors import DataError
from .metrics import evaluate_dataset
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

MODULES = ("origin", "conv_type1", "conv_type2")
# (column label, w1, w2, w3); w2 weights the gradient loss, w3 the MS-SSIM loss
LOSS_SETS = (("L_C", 1.0, 0.0, 0.0), ("L_C+L_M", 1.0, 0.0, 2.0), ("L_C+L_gd+L_M", 1.0, 1.0, 2.0))
# the module group is trained with the full loss, the loss group with conv_type1
COLUMNS = tuple((m, "module", m, LOSS_SETS[-1]) for m in MODULES) + tuple(
    (label, "loss", "conv_type1", (label, w1, w2, w3)) for label, w1, w2, w3 in LOSS_SETS
)
# full-scale published values, reported alongside but never compared
REFERENCE_PSNR = (20.90, 22.32, 21.46, 21.35, 21.74, 22.32)
REFERENCE_SSIM = (0.857, 0.871, 0.863, 0.85, 0.857, 0.862)


@dataclass
class AblationResult:
    columns: tuple[str, ...]
    psnr: tuple[float, ...]
    ssim: tuple[float, ...]

    def ordering(self, metric: str, group: str) -> list[str]:
        """Column labels of one group, best first."""
        values = dict(zip(self.columns, getattr(self, metric)))
        labels = [c[0] for c in COLUMNS if c[1] == group]
        return sorted(labels, key=lambda k: -values[k])

    def rows(self) -> list[list[str]]:
        return [
            ["metric", *self.columns],
            ["PSNR", *(f"{v:.4f}" for v in self.psnr)],
            ["SSIM", *(f"{v:.6f}" for v in self.ssim)],
            ["PSNR_reference", *(f"{v:.2f}" for v in REFERENCE_PSNR)],
            ["SSIM_reference", *(f"{v:.3f}" for v in REFERENCE_SSIM)],
        ]

    def to_text(self) -> str:
        rows = self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        head = " " * widths[0] + " | " + "Module".center(sum(widths[1:4]) + 6) + " | " + "Loss Function".center(sum(widths[4:]) + 6)
        lines = [head]
        for r in rows:
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append(cells[0] + " | " + "   ".join(cells[1:4]) + " | " + "   ".join(cells[4:]))
        lines.append("")
        lines.append("PSNR order (module): " + " > ".join(self.ordering("psnr", "module")))
        lines.append("PSNR order (loss):   " + " > ".join(self.ordering("psnr", "loss")))
        lines.append("*_reference rows: published full-scale values, not reproduced at this scale")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.rows())
        (out / "ablation.txt").write_text(self.to_text(), encoding="utf-8")


def cell_config(base: TrainConfig, variant: str, weights: tuple[float, float, float]) -> TrainConfig:
    w1, w2, w3 = weights
    return dataclasses.replace(
        base,
        model=dataclasses.replace(base.model, variant=variant),
        loss=dataclasses.replace(base.loss, w1=w1, w2=w2, w3=w3),
    )


def ablate(base: TrainConfig, train_data=None, test_data=None, out_dir: str | Path | None = None) -> AblationResult:
    """Train the distinct cells and score them on the test set.

    The conv_type1 / full-loss cell appears in both groups and is trained once.
    ``train_data``/``test_data`` default to ``data.train_dir``/``data.test_dir``.
    """
    size = base.model.image_size
    if train_data is None:
        if not base.train_dir:
            raise DataError("ablation needs data.train_dir")
        train_data = scan_dataset_root(base.train_dir, size, full_reference=True)
    if test_data is None:
        if not base.test_dir:
            raise DataError("ablation needs data.test_dir")
        test_data = scan_dataset_root(base.test_dir, size, full_reference=True)
    test_pairs = list(test_data)

    scores: dict[tuple, tuple[float, float]] = {}
    psnr, ssim = [], []
    for label, _, variant, (_, w1, w2, w3) in COLUMNS:
        key = (variant, w1, w2, w3)
        if key not in scores:
            log.info("ablation cell %s: variant=%s weights=(%g, %g, %g)", label, variant, w1, w2, w3)
            result = train(cell_config(base, variant, (w1, w2, w3)), train_data)
            means = evaluate_dataset(result.model.eval(), test_pairs, "full_reference", base.loss.ms_ssim_scales).means
            scores[key] = (means["psnr"], means["ssim"])
        psnr.append(scores[key][0])
        ssim.append(scores[key][1])
    res = AblationResult(tuple(c[0] for c in COLUMNS), tuple(psnr), tuple(ssim))
    if out_dir is not None:
        res.write(out_dir)
    return res
