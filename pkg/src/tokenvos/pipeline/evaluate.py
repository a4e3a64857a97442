"""Score a model on held-out sequences."""

from __future__ import annotations

import numpy as np

from ..autodiff import precision
from ..config import MemoryPolicy
from ..metrics import EvalReport, score_sequence
from .inference import infer_video
from .model import VOSModel


def evaluate(model: VOSModel, sequences, policy: MemoryPolicy | None = None, ratios=None,
             names=None, tol=None, fp: str | None = None) -> tuple:
    """Run streaming inference on ``(frames, rasters)`` pairs.

    Returns ``(EvalReport, predictions)`` where predictions is a list of
    (T, H, W) uint8 arrays.
    """
    report = EvalReport()
    preds = []
    with precision(fp or np.dtype(model.dtype).name):
        for i, (frames, gt) in enumerate(sequences):
            name = names[i] if names is not None else f"seq{i:03d}"
            pred = np.stack(list(infer_video(model, frames, gt[0], policy, ratios)))
            preds.append(pred)
            num = int(gt[0].max())
            for k, (J, F) in score_sequence(pred, gt, num, tol=tol).items():
                report.add(name, k, J, F)
    return report, preds
