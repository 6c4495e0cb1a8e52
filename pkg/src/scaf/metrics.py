"""Pixel F1 at a fixed threshold, dataset evaluation, JPEG robustness sweep
and report emission."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .dataio import Sample

log = logging.getLogger(__name__)

THRESHOLD = 0.5


@dataclass
class EvalResult:
    per_image_f1: dict
    mean_f1: float
    dataset: str = ""
    threshold: float = THRESHOLD
    errors: dict = field(default_factory=dict)

    def as_dict(self):
        return {"dataset": self.dataset, "threshold": self.threshold, "mean_f1": self.mean_f1,
                "per_image_f1": self.per_image_f1, "errors": self.errors}


def f1_at_threshold(probs, gt, threshold: float = THRESHOLD) -> float:
    """Pixel F1 after binarising ``probs >= threshold``.

    Empty prediction and empty ground truth count as perfect agreement.
    """
    probs, gt = np.asarray(probs), np.asarray(gt).astype(bool)
    if probs.shape != gt.shape:
        raise ValueError(f"prediction shape {probs.shape} != ground-truth shape {gt.shape}")
    pred = probs >= threshold
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2 * tp / denom


@torch.no_grad()
def predict(model, discriminator, image: np.ndarray, image_size: int) -> np.ndarray:
    """Probability map for one H x W x 3 image at its native resolution."""
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].float()
    h, w = x.shape[-2:]
    if (h, w) != (image_size, image_size):
        x = F.interpolate(x, size=(image_size, image_size), mode="bilinear", align_corners=False)
    pp = discriminator.prior_map(x)
    prob = torch.sigmoid(model(x, pp.mp, pp.ap).m1)
    if (h, w) != (image_size, image_size):
        prob = F.interpolate(prob, size=(h, w), mode="bilinear", align_corners=False)
    return prob[0, 0].numpy()


def evaluate(model, discriminator, samples: Sequence[Sample], image_size: int,
             dataset: str = "", threshold: float = THRESHOLD) -> EvalResult:
    per_image, errors = {}, {}
    for s in sorted(samples, key=lambda s: s.id):
        if s.dense_mask is None:
            errors[s.id] = "missing dense mask"
            continue
        per_image[s.id] = f1_at_threshold(predict(model, discriminator, s.image, image_size),
                                          s.dense_mask, threshold)
    if errors:
        log.warning("%d image(s) without dense masks excluded from the mean", len(errors))
    mean = float(np.mean(list(per_image.values()))) if per_image else float("nan")
    return EvalResult(per_image, mean, dataset, threshold, errors)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
    buf = io.BytesIO()
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def robustness_sweep(model, discriminator, samples: Sequence[Sample], image_size: int,
                     qualities: Sequence[int], dataset: str = "") -> list[tuple[int, float]]:
    """Mean F1 after re-encoding every image at each JPEG quality, in the order given."""
    for q in qualities:
        if not isinstance(q, (int, np.integer)) or not 1 <= q <= 100:
            raise ValueError(f"JPEG quality must be an integer in [1, 100], got {q!r}")
    rows = []
    for q in qualities:
        degraded = [Sample(jpeg_roundtrip(s.image, q), s.scribble, s.id, s.dense_mask) for s in samples]
        rows.append((int(q), evaluate(model, discriminator, degraded, image_size, dataset).mean_f1))
    return rows


# ---------------------------------------------------------------------------
# emission

def write_eval(result: EvalResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.jsonl"
    with open(path, "w") as fh:
        for image_id, f1 in result.per_image_f1.items():
            fh.write(json.dumps({"id": image_id, "f1": f1}) + "\n")
        for image_id, err in result.errors.items():
            fh.write(json.dumps({"id": image_id, "error": err}) + "\n")
        fh.write(json.dumps({"summary": True, "dataset": result.dataset, "threshold": result.threshold,
                             "mean_f1": result.mean_f1, "n_images": len(result.per_image_f1),
                             "n_errors": len(result.errors)}) + "\n")
    return path


def read_eval(path) -> EvalResult:
    per_image, errors, summary = {}, {}, {}
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if rec.get("summary"):
            summary = rec
        elif "error" in rec:
            errors[rec["id"]] = rec["error"]
        else:
            per_image[rec["id"]] = rec["f1"]
    return EvalResult(per_image, summary.get("mean_f1", float("nan")), summary.get("dataset", ""),
                      summary.get("threshold", THRESHOLD), errors)


def write_robustness(rows, out_dir) -> tuple[Path, Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "robustness.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quality", "mean_f1"])
        writer.writerows(rows)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([str(q) for q, _ in rows], [f for _, f in rows], marker="o")
    ax.set_xlabel("JPEG quality")
    ax.set_ylabel("mean F1@0.5")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    plot = out / "robustness.png"
    fig.savefig(plot)
    plt.close(fig)
    return table, plot


def write_report(eval_files: dict, out_dir, robustness_csv=None) -> Path:
    """Summarise named eval files (name -> eval.jsonl path) into a markdown
    report plus a per-dataset bar chart."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for name, path in eval_files.items():
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"eval file {path} does not exist")
        results[name] = (path, read_eval(path))
    lines = ["# Evaluation report", "", "| dataset | images | mean F1@0.5 | source |", "|---|---|---|---|"]
    for name, (path, res) in results.items():
        lines.append(f"| {name} | {len(res.per_image_f1)} | {res.mean_f1:.4f} | {path} |")
    if robustness_csv is not None:
        lines += ["", "## JPEG robustness", "", "| quality | mean F1@0.5 |", "|---|---|"]
        with open(robustness_csv) as fh:
            for row in list(csv.reader(fh))[1:]:
                lines.append(f"| {row[0]} | {float(row[1]):.4f} |")
    report = out / "report.md"
    report.write_text("\n".join(lines) + "\n")

    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(results)
    ax.bar(names, [results[n][1].mean_f1 for n in names])
    ax.set_ylabel("mean F1@0.5")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out / "datasets.png")
    plt.close(fig)
    return report


def evaluate_checkpoint(path, samples: Sequence[Sample], dataset: str = "") -> EvalResult:
    from .trainer import model_from_checkpoint
    model, md, cfg = model_from_checkpoint(path)
    return evaluate(model, md, samples, cfg.train.image_size, dataset)


def robustness_checkpoint(path, samples: Sequence[Sample], qualities: Sequence[int],
                          dataset: str = "") -> list[tuple[int, float]]:
    from .trainer import model_from_checkpoint
    model, md, cfg = model_from_checkpoint(path)
    return robustness_sweep(model, md, samples, cfg.train.image_size, qualities, dataset)
