"""Distillation objectives and the two training loops.

``train_teacher`` fits a binary encoder with class-weighted cross-entropy on
bonafide and spoofed audio. ``distill_student`` fits a shallower encoder on
bonafide audio only, pulling its mapped layer and backend embeddings towards
those of a frozen teacher with ``L_cos + lambda * L_mse``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .models import BACKEND, Encoder, LayerMap, layer_map

log = logging.getLogger(__name__)

BONAFIDE_INDEX = 1
SPOOF_INDEX = 0
OBJECTIVES = ("total", "cos", "mse")


class DegenerateEmbeddingError(ValueError):
    """An embedding has (numerically) zero norm, so its cosine is undefined."""

    def __init__(self, index, which="", utt_id=None):
        self.index = index
        self.utt_id = utt_id
        where = f"utterance {utt_id}" if utt_id is not None else f"batch index {index}"
        super().__init__(f"zero-norm {which}embedding at {where}".replace("  ", " "))


class OneClassViolation(ValueError):
    """A spoofed utterance was passed to bonafide-only training."""


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


# -- losses ------------------------------------------------------------------

def _pair_check(teacher_emb, student_emb):
    t = ad.as_tensor(teacher_emb)
    s = ad.as_tensor(student_emb)
    if t.ndim == 1:
        t = ad.reshape(t, (1, -1))
    if s.ndim == 1:
        s = ad.reshape(s, (1, -1))
    if t.shape != s.shape or t.ndim != 2:
        raise ad.ShapeError("distill_loss", t.shape, s.shape)
    return t, s


def loss_mse(teacher_emb, student_emb):
    """Squared L2 distance summed over components, averaged over the batch."""
    t, s = _pair_check(teacher_emb, student_emb)
    return ad.mean(ad.sum(ad.square(t - s), axis=1))


def loss_cos(teacher_emb, student_emb, eps=1e-12):
    """Mean of ``1 - cos(T(b), S(b))`` over the batch; lies in ``[0, 2]``."""
    t, s = _pair_check(teacher_emb, student_emb)
    nt = ad.sqrt(ad.sum(ad.square(t), axis=1))
    ns = ad.sqrt(ad.sum(ad.square(s), axis=1))
    for which, n in (("teacher ", nt), ("student ", ns)):
        bad = np.flatnonzero(n.data < eps)
        if bad.size:
            raise DegenerateEmbeddingError(int(bad[0]), which)
    cos = ad.sum(t * s, axis=1) / (nt * ns)
    return ad.mean(1.0 - cos)


@dataclass
class PairLossReport:
    per_pair_cos: dict
    per_pair_mse: dict
    l_cos: float
    l_mse: float
    l_total: float
    lam: float
    loss: Tensor = field(repr=False, default=None)


def loss_total(stack_t, stack_s, lmap, lam=1e-5, objective="total"):
    """Average each loss over all mapped pairs, then combine as ``L_cos + lam * L_mse``.

    ``objective="cos"`` and ``"mse"`` train on a single term (the ablation
    variants); the report still carries both terms.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    pairs = lmap.all_pairs()
    cos_terms, mse_terms = {}, {}
    for si, ti in pairs:
        try:
            t = stack_t.get(ti)
            s = stack_s.get(si)
        except KeyError as exc:
            raise KeyError(f"layer map pair ({si}, {ti}): {exc.args[0]}") from None
        cos_terms[(si, ti)] = loss_cos(t, s)
        mse_terms[(si, ti)] = loss_mse(t, s)
    k = 1.0 / len(pairs)
    l_cos = ad.sum(ad.concat([ad.reshape(v, (1,)) for v in cos_terms.values()])) * k
    l_mse = ad.sum(ad.concat([ad.reshape(v, (1,)) for v in mse_terms.values()])) * k
    if objective == "total":
        loss = l_cos + l_mse * lam
    elif objective == "cos":
        loss = l_cos
    else:
        loss = l_mse
    return PairLossReport(
        per_pair_cos={p: float(v.data) for p, v in cos_terms.items()},
        per_pair_mse={p: float(v.data) for p, v in mse_terms.items()},
        l_cos=float(l_cos.data),
        l_mse=float(l_mse.data),
        l_total=float(l_cos.data) + lam * float(l_mse.data),
        lam=lam,
        loss=loss,
    )


def weighted_cross_entropy(logits, targets, class_weight=(0.1, 0.9)):
    """``mean_i w[y_i] * -log softmax(logits_i)[y_i]`` (no renormalisation by the weights)."""
    logits = ad.as_tensor(logits)
    targets = np.asarray(targets, dtype=int)
    n, c = logits.shape
    weights = np.asarray(class_weight, dtype=np.float64)
    if weights.shape != (c,):
        raise ad.ShapeError("weighted_cross_entropy", logits.shape, weights.shape)
    pick = np.zeros((n, c))
    pick[np.arange(n), targets] = weights[targets]
    return -ad.mean(ad.sum(ad.log_softmax(logits) * pick, axis=1))


# -- batching and augmentation -----------------------------------------------

def crop_or_pad(x, length, rng):
    """Random window of ``length`` samples; short inputs are tiled."""
    n = len(x)
    if n >= length:
        start = int(rng.integers(0, n - length + 1))
        return x[start:start + length]
    reps = -(-length // n)
    return np.tile(x, reps)[:length]


def add_noise(x, rng, snr_db=(15.0, 40.0)):
    snr = rng.uniform(*snr_db)
    rms = np.sqrt(np.mean(x * x))
    return x + rng.standard_normal(len(x)) * rms * 10 ** (-snr / 20)


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    crop_samples: int = 16000
    augment: bool = False
    snr_db: tuple = (15.0, 40.0)
    seed: int = 0
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(
                f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def make_batch(waves, indices, epoch, settings):
    """Crop and (optionally) augment; randomness keyed by (seed, epoch, utterance)."""
    out = np.empty((len(indices), settings.crop_samples))
    for row, i in enumerate(indices):
        rng = np.random.default_rng([settings.seed, epoch, int(i)])
        x = crop_or_pad(waves[i], settings.crop_samples, rng)
        if settings.augment:
            x = add_noise(x, rng, settings.snr_db)
        out[row] = x
    return out


def epoch_learning_rate(settings, epoch):
    """Step size for 1-based ``epoch``; cosine decays from the base rate towards 0."""
    if settings.lr_schedule == "constant":
        return settings.learning_rate
    frac = (epoch - 1) / settings.epochs
    return settings.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))


def _epoch_order(n, epoch, seed):
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def _check_finite(value, epoch, step):
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")


@dataclass
class LossLog:
    """Per-epoch mean training loss, emitted as ``epoch<TAB>loss<TAB>wallclock_ms``."""

    records: list = field(default_factory=list)

    def append(self, epoch, loss, ms):
        self.records.append((epoch, loss, ms))

    @property
    def losses(self):
        return [r[1] for r in self.records]

    def to_text(self):
        return "".join(f"{e}\t{l:.8f}\t{ms:.0f}\n" for e, l, ms in self.records)


# -- training loops ----------------------------------------------------------

def train_teacher(waves, labels, model, settings, class_weight=(0.1, 0.9)):
    """Fit ``model`` (an :class:`Encoder` with a 2-class head) in place.

    ``labels`` holds 1 for bonafide and 0 for spoof.
    """
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) < 2:
        raise ValueError("teacher training needs both bonafide and spoof utterances")
    if model.config.num_classes != 2:
        raise ValueError("teacher encoder must have a 2-class head")
    opt = Adam(model.parameters(), lr=settings.learning_rate,
               weight_decay=settings.weight_decay)
    history = LossLog()
    t0 = time.perf_counter()
    for epoch in range(1, settings.epochs + 1):
        opt.state.learning_rate = epoch_learning_rate(settings, epoch)
        order = _epoch_order(len(waves), epoch, settings.seed)
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(order), settings.batch_size)):
            idx = order[start:start + settings.batch_size]
            x = make_batch(waves, idx, epoch, settings)
            opt.zero_grad()
            stack = model(x)
            loss = weighted_cross_entropy(stack.logits, labels[idx], class_weight)
            _check_finite(loss.data, epoch, step)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
            count += len(idx)
        history.append(epoch, total / count, (time.perf_counter() - t0) * 1000)
        log.info("teacher epoch %d loss %.5f", epoch, total / count)
    return history


@dataclass
class DistillConfig:
    lam: float = 1e-5
    layer_map: LayerMap = None
    objective: str = "total"
    settings: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")


def check_bonafide_only(labels, utt_ids=None):
    labels = np.asarray(labels)
    bad = np.flatnonzero(labels != BONAFIDE_INDEX)
    if bad.size:
        i = int(bad[0])
        name = utt_ids[i] if utt_ids is not None else f"index {i}"
        raise OneClassViolation(
            f"student training data must be bonafide only; {name} is spoof"
        )


def distill_student(waves, teacher, student, config, labels=None, utt_ids=None,
                    callback=None):
    """Fit ``student`` in place against the frozen ``teacher``.

    ``callback(epoch, student)`` runs after every epoch when given.
    """
    if labels is not None:
        check_bonafide_only(labels, utt_ids)
    if not teacher.config.compatible_with(student.config):
        raise ValueError(
            "teacher and student must share d_model and frontend framing: "
            f"{teacher.config} vs {student.config}"
        )
    lmap = config.layer_map or layer_map(teacher.config.num_layers, student.config.num_layers)
    settings = config.settings
    frozen = teacher.digest()
    opt = Adam(student.parameters(), lr=settings.learning_rate,
               weight_decay=settings.weight_decay)
    history = LossLog()
    t0 = time.perf_counter()
    for epoch in range(1, settings.epochs + 1):
        opt.state.learning_rate = epoch_learning_rate(settings, epoch)
        order = _epoch_order(len(waves), epoch, settings.seed)
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(order), settings.batch_size)):
            idx = order[start:start + settings.batch_size]
            x = make_batch(waves, idx, epoch, settings)
            with ad.no_grad():
                target = teacher(x)
            opt.zero_grad()
            report = loss_total(target, student(x), lmap, config.lam, config.objective)
            _check_finite(report.loss.data, epoch, step)
            report.loss.backward()
            opt.step()
            total += float(report.loss.data) * len(idx)
            count += len(idx)
        history.append(epoch, total / count, (time.perf_counter() - t0) * 1000)
        log.info("student epoch %d loss %.6f", epoch, total / count)
        if callback is not None:
            callback(epoch, student)
    if teacher.digest() != frozen:
        raise RuntimeError("teacher parameters changed during distillation")
    return history


STUDENT_INITS = ("frontend", "mapped", "random")


def init_student(teacher, student_config, seed=0, copy="frontend"):
    """Fresh student encoder, optionally seeded with teacher weights.

    ``copy="frontend"`` shares the teacher's frontend and backend query and
    leaves every transformer layer random. ``"mapped"`` additionally copies
    teacher layer ``(s + 1) * r`` into student layer ``s + 1``. ``"random"``
    copies nothing.
    """
    if copy not in STUDENT_INITS:
        raise ValueError(f"copy must be one of {STUDENT_INITS}, got {copy!r}")
    student = Encoder(student_config, seed=seed)
    if copy == "random":
        return student
    for name in ("frontend.weight", "frontend.bias", "backend.query"):
        student.params[name].data[...] = teacher.params[name].data
    if copy == "mapped":
        r = teacher.config.num_layers // student_config.num_layers
        for s in range(student_config.num_layers):
            src_prefix, dst_prefix = f"layers.{(s + 1) * r - 1}.", f"layers.{s}."
            for name in student.params:
                if name.startswith(dst_prefix):
                    src = src_prefix + name[len(dst_prefix):]
                    student.params[name].data[...] = teacher.params[src].data
    return student
