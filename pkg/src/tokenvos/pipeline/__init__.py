"""Model assembly, losses, training and streaming inference."""

from .evaluate import evaluate
from .inference import InferenceSession, SessionError, infer_video
from .losses import bootstrapped_ce, pixel_cross_entropy, soft_jaccard
from .model import SELECT_MODES, FrameOutput, MemoryRead, VOSModel
from .train import Batch, Schedule, Trainer, TrainingDiverged, make_batch, sequence_loss

__all__ = [
    "Batch", "FrameOutput", "InferenceSession", "MemoryRead", "SELECT_MODES", "Schedule", "SessionError",
    "Trainer", "TrainingDiverged", "VOSModel", "bootstrapped_ce", "evaluate", "infer_video", "make_batch",
    "pixel_cross_entropy", "sequence_loss", "soft_jaccard",
]
