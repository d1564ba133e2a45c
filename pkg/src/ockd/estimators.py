"""scikit-learn style wrappers around the teacher and the OCKD student.

Inputs are sequences of 1-D waveforms at 16 kHz; see
:func:`ockd.validation.check_waveforms`.

>>> teacher = TeacherClassifier(num_layers=2, epochs=1).fit(waves, labels)
>>> detector = OCKDDetector(teacher, num_layers=2, epochs=1).fit(bonafide_waves)
>>> detector.score_samples(test_waves)  # higher means more bonafide-like
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .distill import (
    BONAFIDE_INDEX,
    DistillConfig,
    TrainSettings,
    check_bonafide_only,
    distill_student,
    init_student,
    train_teacher,
)
from .metrics import stack_similarity
from .models import Encoder, EncoderConfig, layer_map
from .validation import LABELS, check_labels, check_utt_ids, check_waveforms


def forward_each(encoder, waves):
    """Per-utterance inference (lengths differ); returns numpy HiddenStacks."""
    out = []
    with ad.no_grad():
        for x in waves:
            out.append(encoder(x[None, :]).numpy())
    return out


def logit_score(stack):
    """Bonafide minus spoof logit, one value per row."""
    return stack.logits[:, BONAFIDE_INDEX] - stack.logits[:, 1 - BONAFIDE_INDEX]


def _teacher_encoder(teacher):
    if isinstance(teacher, Encoder):
        return teacher
    if isinstance(teacher, TeacherClassifier):
        check_is_fitted(teacher, "encoder_")
        return teacher.encoder_
    raise TypeError(
        f"teacher must be a fitted TeacherClassifier or an Encoder, got {type(teacher).__name__}"
    )


class TeacherClassifier(ClassifierMixin, BaseEstimator):
    """Binary bonafide/spoof encoder trained with class-weighted cross-entropy.

    ``classes_`` is ``["spoof", "bonafide"]``; :meth:`decision_function`
    returns the bonafide-minus-spoof logit, so higher means more bonafide.
    """

    def __init__(self, num_layers=12, d_model=32, n_heads=2, ff_dim=64,
                 frontend_frame=400, frontend_stride=320, epochs=25, batch_size=32,
                 learning_rate=2e-3, weight_decay=1e-4, crop_samples=16000,
                 augment=False, lr_schedule="cosine", class_weight=(0.1, 0.9),
                 random_state=0):
        self.num_layers = num_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.frontend_frame = frontend_frame
        self.frontend_stride = frontend_stride
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.crop_samples = crop_samples
        self.augment = augment
        self.lr_schedule = lr_schedule
        self.class_weight = class_weight
        self.random_state = random_state

    def _encoder_config(self):
        return EncoderConfig(
            num_layers=self.num_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            ff_dim=self.ff_dim,
            frontend_frame=self.frontend_frame,
            frontend_stride=self.frontend_stride,
            num_classes=2,
        )

    def _settings(self):
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            crop_samples=self.crop_samples,
            augment=self.augment,
            lr_schedule=self.lr_schedule,
            seed=self.random_state,
        )

    def fit(self, X, y):
        waves = check_waveforms(X)
        labels = check_labels(y, len(waves))
        encoder = Encoder(self._encoder_config(), seed=self.random_state)
        self.loss_log_ = train_teacher(
            waves, labels, encoder, self._settings(), tuple(self.class_weight)
        )
        self.encoder_ = encoder
        self.classes_ = np.array(LABELS)
        return self

    def hidden_stacks(self, X):
        check_is_fitted(self, "encoder_")
        return forward_each(self.encoder_, check_waveforms(X, self.frontend_frame))

    def decision_function(self, X):
        return np.array([logit_score(s)[0] for s in self.hidden_stacks(X)])

    def predict_proba(self, X):
        logits = np.stack([s.logits[0] for s in self.hidden_stacks(X)])
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


class OCKDDetector(OutlierMixin, BaseEstimator):
    """Bonafide-only student distilled from a frozen teacher.

    :meth:`score_samples` is the mean teacher/student cosine over the layer
    map. :meth:`predict` returns +1 (bonafide) or -1 (spoof) using ``offset_``,
    the ``threshold_quantile`` of the training scores.
    """

    def __init__(self, teacher=None, num_layers=4, objective="total", lambda_=1e-5,
                 epochs=30, batch_size=32, learning_rate=1e-3, weight_decay=1e-4,
                 crop_samples=16000, init="frontend", lr_schedule="cosine",
                 threshold_quantile=0.05, random_state=0):
        self.teacher = teacher
        self.num_layers = num_layers
        self.objective = objective
        self.lambda_ = lambda_
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.crop_samples = crop_samples
        self.init = init
        self.lr_schedule = lr_schedule
        self.threshold_quantile = threshold_quantile
        self.random_state = random_state

    def _distill_config(self, lmap):
        settings = TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            crop_samples=self.crop_samples,
            lr_schedule=self.lr_schedule,
            seed=self.random_state,
        )
        return DistillConfig(lam=self.lambda_, layer_map=lmap, objective=self.objective,
                             settings=settings)

    def fit(self, X, y=None, utt_ids=None):
        """Distill on bonafide waveforms ``X``.

        ``y`` is optional; when given, any spoof label aborts the fit with an
        error naming the offending utterance.
        """
        teacher = _teacher_encoder(self.teacher)
        waves = check_waveforms(X)
        ids = check_utt_ids(utt_ids, len(waves))
        if y is not None:
            check_bonafide_only(check_labels(y, len(waves)), ids)
        lmap = layer_map(teacher.config.num_layers, self.num_layers)
        student = init_student(teacher, teacher.config.student(self.num_layers),
                               seed=self.random_state, copy=self.init)
        self.teacher_digest_ = teacher.digest()
        self.loss_log_ = distill_student(waves, teacher, student, self._distill_config(lmap))
        self.student_ = student
        self.layer_map_ = lmap
        self.offset_ = float(np.quantile(self.score_samples(waves), self.threshold_quantile))
        return self

    def score_samples(self, X, utt_ids=None):
        check_is_fitted(self, "student_")
        teacher = _teacher_encoder(self.teacher)
        waves = check_waveforms(X, teacher.config.frontend_frame)
        ids = check_utt_ids(utt_ids, len(waves))
        scores = np.empty(len(waves))
        with ad.no_grad():
            for i, x in enumerate(waves):
                st = teacher(x[None, :]).numpy()
                ss = self.student_(x[None, :]).numpy()
                scores[i] = stack_similarity(st, ss, self.layer_map_, ids[i:i + 1])[0]
        return scores

    def decision_function(self, X):
        return self.score_samples(X) - self.offset_

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0, 1, -1)
