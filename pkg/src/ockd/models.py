"""Toy Wav2Vec-style encoder: framed linear frontend, pre-norm transformer
blocks, and an attention-pooling backend.

Both the teacher and the student are :class:`Encoder` instances; only
``num_layers`` and ``num_classes`` differ between them.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BACKEND = "A"


class ConfigError(ValueError):
    """Invalid architecture or layer-map configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 12
    d_model: int = 32
    n_heads: int = 4
    ff_dim: int = 64
    frontend_frame: int = 400
    frontend_stride: int = 200
    num_classes: Optional[int] = 2

    def __post_init__(self):
        for name in ("num_layers", "d_model", "n_heads", "ff_dim",
                     "frontend_frame", "frontend_stride"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"n_heads={self.n_heads} does not divide d_model={self.d_model}"
            )
        if self.num_classes is not None and self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def student(self, num_layers):
        """Config for a student sharing this frontend and width, without a head."""
        return EncoderConfig(
            num_layers=num_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            ff_dim=self.ff_dim,
            frontend_frame=self.frontend_frame,
            frontend_stride=self.frontend_stride,
            num_classes=None,
        )

    def compatible_with(self, other):
        return (
            self.d_model == other.d_model
            and self.frontend_frame == other.frontend_frame
            and self.frontend_stride == other.frontend_stride
        )


@dataclass
class HiddenStack:
    """Pooled per-layer embeddings of a batch.

    ``layer_embeddings[i - 1]`` is the time-mean of transformer block ``i``,
    shape ``(batch, d_model)``. Entries are :class:`Tensor` when produced by
    a recording forward pass.
    """

    layer_embeddings: list
    backend_embedding: object = None
    logits: object = None

    @property
    def num_layers(self):
        return len(self.layer_embeddings)

    def get(self, index):
        """Embedding by 1-based layer index, or ``"A"`` for the backend."""
        if index == BACKEND:
            if self.backend_embedding is None:
                raise KeyError("stack has no backend embedding")
            return self.backend_embedding
        if not 1 <= index <= len(self.layer_embeddings):
            raise KeyError(
                f"layer {index} not in stack of {len(self.layer_embeddings)} layers"
            )
        return self.layer_embeddings[index - 1]

    def numpy(self):
        def _np(x):
            return x.data if isinstance(x, Tensor) else x

        return HiddenStack(
            [_np(e) for e in self.layer_embeddings],
            _np(self.backend_embedding),
            _np(self.logits),
        )


@dataclass(frozen=True)
class LayerMap:
    """Student-to-teacher layer pairs (1-based) plus the backend pair."""

    pairs: tuple
    includes_backend: bool = True

    def all_pairs(self):
        out = list(self.pairs)
        if self.includes_backend:
            out.append((BACKEND, BACKEND))
        return out

    def __len__(self):
        return len(self.pairs) + int(self.includes_backend)


def layer_map(teacher_layers, student_layers):
    """Pair student layer ``2k`` with teacher layer ``2k * L_T / L_S``."""
    if student_layers < 2 or student_layers % 2:
        raise ConfigError(f"student depth must be even and >= 2, got {student_layers}")
    if teacher_layers < student_layers or teacher_layers % student_layers:
        raise ConfigError(
            f"teacher depth {teacher_layers} is not a multiple of student depth "
            f"{student_layers}"
        )
    r = teacher_layers // student_layers
    pairs = tuple((2 * k, 2 * k * r) for k in range(1, student_layers // 2 + 1))
    return LayerMap(pairs=pairs, includes_backend=True)


# -- frontend ----------------------------------------------------------------

def num_frames(n_samples, frame, stride):
    if n_samples < frame:
        raise ValueError(f"waveform of {n_samples} samples is shorter than one frame ({frame})")
    return (n_samples - frame) // stride + 1


def frame_signal(waveforms, frame, stride):
    """``(B, n)`` samples to ``(B, T, frame)`` overlapping frames (a copy)."""
    waveforms = np.atleast_2d(np.asarray(waveforms, dtype=np.float64))
    num_frames(waveforms.shape[-1], frame, stride)
    win = np.lib.stride_tricks.sliding_window_view(waveforms, frame, axis=-1)
    return np.ascontiguousarray(win[:, ::stride, :])


def normalize_waveforms(waveforms, eps=1e-7):
    """Zero mean, unit variance per row."""
    x = np.atleast_2d(np.asarray(waveforms, dtype=np.float64))
    x = x - x.mean(axis=-1, keepdims=True)
    return x / np.sqrt(x.var(axis=-1, keepdims=True) + eps)


def fft_size(frame):
    return 1 << (int(frame) - 1).bit_length()


def frame_features(waveforms, frame, stride):
    """Log-compressed magnitude spectrum of each Hann-windowed frame.

    ``log1p(|X| / 0.1) / 2`` keeps silence at exactly zero and puts speech
    frames at roughly unit scale.
    """
    frames = frame_signal(normalize_waveforms(waveforms), frame, stride) * np.hanning(frame)
    mag = np.abs(np.fft.rfft(frames, n=fft_size(frame), axis=-1))
    return np.log1p(mag / 0.1) / 2.0


def conv_frontend(waveforms, weight, bias, frame, stride):
    """Strided linear projection of frame features followed by GELU -> ``(B, T, d)``."""
    return ad.gelu(ad.matmul(frame_features(waveforms, frame, stride), weight) + bias)


def sinusoidal_positions(length, d_model):
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# -- encoder -----------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config, seed=0):
    """Fresh parameters, ``uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for linear maps."""
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.ff_dim
    p = {}

    def linear(name, fan_in, fan_out):
        p[f"{name}.weight"] = _uniform(rng, fan_in, (fan_in, fan_out))
        p[f"{name}.bias"] = _uniform(rng, fan_in, (fan_out,))

    linear("frontend", fft_size(config.frontend_frame) // 2 + 1, d)
    for i in range(config.num_layers):
        pre = f"layers.{i}"
        p[f"{pre}.ln1.gamma"] = np.ones(d)
        p[f"{pre}.ln1.beta"] = np.zeros(d)
        for proj in ("q", "k", "v", "o"):
            linear(f"{pre}.attn.{proj}", d, d)
        # a key bias shifts every score in a row equally; softmax ignores it
        del p[f"{pre}.attn.k.bias"]
        p[f"{pre}.ln2.gamma"] = np.ones(d)
        p[f"{pre}.ln2.beta"] = np.zeros(d)
        linear(f"{pre}.ff1", d, f)
        linear(f"{pre}.ff2", f, d)
    p["backend.query"] = np.zeros(d)
    if config.num_classes is not None:
        linear("head", d, config.num_classes)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class Encoder:
    """Parameters plus the forward pass producing a :class:`HiddenStack`."""

    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        expected = set(init_params(config, 0))
        if set(self.params) != expected:
            missing = sorted(expected - set(self.params))
            extra = sorted(set(self.params) - expected)
            raise ConfigError(f"parameter mismatch: missing={missing} extra={extra}")

    def parameters(self):
        return list(self.params.values())

    def digest(self):
        """SHA-256 over parameter names, shapes and bytes."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data, dtype="<f8")
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def frontend(self, waveforms):
        c = self.config
        x = conv_frontend(
            waveforms,
            self.params["frontend.weight"],
            self.params["frontend.bias"],
            c.frontend_frame,
            c.frontend_stride,
        )
        return x + sinusoidal_positions(x.shape[1], c.d_model)

    def _attention(self, x, pre):
        p = self.params
        B, T, d = x.shape
        H = self.config.n_heads
        dh = d // H

        def heads(t):
            return ad.permute(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = heads(x @ p[f"{pre}.q.weight"] + p[f"{pre}.q.bias"])
        k = heads(x @ p[f"{pre}.k.weight"])
        v = heads(x @ p[f"{pre}.v.weight"] + p[f"{pre}.v.bias"])
        w = ad.softmax(ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(dh)))
        ctx = ad.reshape(ad.permute(ad.matmul(w, v), (0, 2, 1, 3)), (B, T, d))
        return ctx @ p[f"{pre}.o.weight"] + p[f"{pre}.o.bias"]

    def block(self, x, i):
        p = self.params
        pre = f"layers.{i}"
        h = x + self._attention(
            ad.layer_norm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"]), f"{pre}.attn"
        )
        z = ad.layer_norm(h, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
        z = ad.gelu(z @ p[f"{pre}.ff1.weight"] + p[f"{pre}.ff1.bias"])
        return h + (z @ p[f"{pre}.ff2.weight"] + p[f"{pre}.ff2.bias"])

    def encode(self, frames):
        """Run the transformer stack; returns the final sequence and a HiddenStack."""
        x = frames
        pooled = []
        for i in range(self.config.num_layers):
            x = self.block(x, i)
            pooled.append(ad.mean(x, axis=1))
        return x, HiddenStack(pooled)

    def backend(self, seq):
        """Learned-query attention pooling; returns ``(embedding, logits or None)``."""
        B, T, d = seq.shape
        q = ad.reshape(self.params["backend.query"], (d, 1))
        scores = ad.transpose(ad.matmul(seq, q))  # (B, 1, T)
        w = ad.softmax(scores * (1.0 / np.sqrt(d)))
        emb = ad.reshape(ad.matmul(w, seq), (B, d))
        logits = None
        if self.config.num_classes is not None:
            logits = emb @ self.params["head.weight"] + self.params["head.bias"]
        return emb, logits

    def forward(self, waveforms):
        seq, stack = self.encode(self.frontend(waveforms))
        stack.backend_embedding, stack.logits = self.backend(seq)
        return stack

    __call__ = forward
