"""One-class knowledge distillation (OCKD) for spoofed-speech detection.

A binary teacher learns bonafide vs. spoof; a shallower student learns to
reproduce the teacher's layer embeddings on bonafide speech only. At test
time the teacher/student cosine similarity is the detection score.
"""

from .estimators import OCKDDetector, TeacherClassifier
from .metrics import EERResult, ScoreRecord, compute_eer, det_points, pooled_eer
from .models import Encoder, EncoderConfig, HiddenStack, LayerMap, layer_map

__version__ = "0.1.0"

__all__ = [
    "EERResult",
    "Encoder",
    "EncoderConfig",
    "HiddenStack",
    "LayerMap",
    "OCKDDetector",
    "ScoreRecord",
    "TeacherClassifier",
    "compute_eer",
    "det_points",
    "layer_map",
    "pooled_eer",
]
