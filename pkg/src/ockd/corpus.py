"""Seeded synthetic speech-like corpus.

Bonafide utterances come from a small source-filter model: a jittered,
vibrato-modulated glottal pulse train through 2-3 formant resonators, under a
syllabic amplitude envelope padded with low-level "silence". Spoofed
utterances start from the same draw and apply one family-specific artifact.
Families ``A01..A04`` are used for training and the seen evaluation split;
``U01..U04`` only ever appear in ``eval_unseen``.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
BONAFIDE = "bonafide"
SPOOF = "spoof"
SEEN_FAMILIES = ("A01", "A02", "A03", "A04")
UNSEEN_FAMILIES = ("U01", "U02", "U03", "U04")
SPLITS = ("train", "dev", "eval_seen", "eval_unseen")


class CorpusError(ValueError):
    pass


class TrimError(CorpusError):
    pass


@dataclass
class Utterance:
    utt_id: str
    samples: np.ndarray
    label: str = BONAFIDE
    attack_id: str = "-"

    @property
    def duration_s(self):
        return len(self.samples) / SAMPLE_RATE


@dataclass(frozen=True)
class ProtocolEntry:
    utt_id: str
    attack_id: str
    label: str

    def line(self):
        return f"{self.utt_id} {self.attack_id} {self.label}\n"


@dataclass(frozen=True)
class BonafideParams:
    """Ranges the bonafide voice draw samples from."""

    min_duration: float = 1.0
    max_duration: float = 4.0
    f0_range: tuple = (90.0, 220.0)
    jitter_range: tuple = (0.01, 0.025)
    shimmer_range: tuple = (0.05, 0.12)
    vibrato_rate: tuple = (4.0, 7.0)
    vibrato_depth: tuple = (0.02, 0.05)
    contour_depth: tuple = (0.05, 0.15)
    silence_range: tuple = (0.15, 0.35)
    snr_db_range: tuple = (45.0, 60.0)
    peak_range: tuple = (0.3, 0.9)


@dataclass
class _Voice:
    n_samples: int
    f0: float
    jitter: float
    shimmer: float
    vib_rate: float
    vib_depth: float
    contour: np.ndarray  # (knots,) relative pitch offsets
    formants: list  # (freq, bandwidth)
    glottal_pole: float
    lead: int
    trail: int
    syllable_rate: float
    syllable_phase: float
    snr_db: float
    peak: float
    aspiration: float


def utt_rng(seed, key):
    """Independent generator for ``(seed, key)``; stable across runs and platforms."""
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _draw_voice(rng, params):
    p = params
    dur = rng.uniform(p.min_duration, p.max_duration)
    n = int(round(dur * SAMPLE_RATE))
    n_formants = int(rng.integers(2, 4))
    bands = [(300.0, 900.0), (900.0, 2400.0), (2400.0, 3600.0)]
    formants = [
        (rng.uniform(*bands[i]), rng.uniform(60.0, 180.0)) for i in range(n_formants)
    ]
    lead = int(rng.uniform(*p.silence_range) * SAMPLE_RATE)
    trail = int(rng.uniform(*p.silence_range) * SAMPLE_RATE)
    # guarantee at least half a second of voiced signal
    excess = lead + trail + SAMPLE_RATE // 2 - n
    if excess > 0:
        lead -= excess // 2 + 1
        trail -= excess // 2 + 1
    return _Voice(
        n_samples=n,
        f0=rng.uniform(*p.f0_range),
        jitter=rng.uniform(*p.jitter_range),
        shimmer=rng.uniform(*p.shimmer_range),
        vib_rate=rng.uniform(*p.vibrato_rate),
        vib_depth=rng.uniform(*p.vibrato_depth),
        contour=rng.uniform(-1.0, 1.0, size=4) * rng.uniform(*p.contour_depth),
        formants=formants,
        glottal_pole=rng.uniform(0.90, 0.97),
        lead=max(lead, 1),
        trail=max(trail, 1),
        syllable_rate=rng.uniform(3.0, 5.0),
        syllable_phase=rng.uniform(0.0, 2 * np.pi),
        snr_db=rng.uniform(*p.snr_db_range),
        peak=rng.uniform(*p.peak_range),
        aspiration=rng.uniform(0.15, 0.3),
    )


def _pulse_positions(v, rng):
    """Glottal closure instants (sample indices) for the voiced span."""
    t = float(v.lead)
    end = v.n_samples - v.trail
    span = max(end - v.lead, 1)
    knots = np.linspace(0.0, 1.0, len(v.contour))
    out = []
    while t < end:
        u = (t - v.lead) / span
        rel = np.interp(u, knots, v.contour)
        vib = v.vib_depth * np.sin(2 * np.pi * v.vib_rate * t / SAMPLE_RATE)
        f0 = v.f0 * (1.0 + rel + vib)
        period = SAMPLE_RATE / f0 * (1.0 + v.jitter * rng.standard_normal())
        out.append(t)
        t += max(period, 8.0)
    return np.asarray(out)


def _envelope(v):
    n = v.n_samples
    env = np.zeros(n)
    start, end = v.lead, n - v.trail
    t = np.arange(end - start) / SAMPLE_RATE
    syll = 0.35 + 0.65 * np.abs(np.sin(np.pi * v.syllable_rate * t + v.syllable_phase))
    ramp = min(int(0.03 * SAMPLE_RATE), (end - start) // 2)
    win = np.ones(end - start)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        win[:ramp] = r
        win[-ramp:] = r[::-1]
    env[start:end] = syll * win
    return env


def _resonator(freq, bw):
    """Two-pole band-pass with unit gain at ``freq``."""
    r = np.exp(-np.pi * bw / SAMPLE_RATE)
    theta = 2 * np.pi * freq / SAMPLE_RATE
    a = [1.0, -2 * r * np.cos(theta), r * r]
    g = (1 - r * r) / 2
    return [g, 0.0, -g], a


A01_F0 = 120.0


def _synthesize(v, rng, constant_pitch=False, formant_scale=1.0):
    if constant_pitch:
        # the A01 "vocoder" emits one fixed F0 for every utterance
        v = replace(v, f0=A01_F0, jitter=0.0, shimmer=0.0, vib_depth=0.0,
                    contour=np.zeros_like(v.contour))
    pulses = _pulse_positions(v, rng)
    src = np.zeros(v.n_samples)
    amps = 1.0 + v.shimmer * rng.standard_normal(len(pulses))
    idx = np.clip(np.round(pulses).astype(int), 0, v.n_samples - 1)
    np.add.at(src, idx, amps)
    g = v.glottal_pole
    src = signal.lfilter([1 - g], [1.0, -g], src)
    src = np.diff(src, prepend=0.0)  # lip radiation
    env = _envelope(v)
    x = np.zeros(v.n_samples)
    for k, (freq, bw) in enumerate(v.formants):
        b, a = _resonator(freq, bw * formant_scale)
        x += 0.6**k * signal.lfilter(b, a, src)
    x /= np.sqrt(np.mean(x**2)) + 1e-12
    breath = signal.lfilter(*_resonator(5000.0, 4000.0), rng.standard_normal(v.n_samples))
    breath /= np.sqrt(np.mean(breath**2)) + 1e-12
    x = (x + v.aspiration * breath) * env
    x /= np.max(np.abs(x)) + 1e-12
    speech_rms = np.sqrt(np.mean(x[v.lead:v.n_samples - v.trail] ** 2))
    noise = rng.standard_normal(v.n_samples) * speech_rms * 10 ** (-v.snr_db / 20)
    return x + noise


def _normalize(x, peak):
    return x * (peak / (np.max(np.abs(x)) + 1e-12))


def gen_bonafide(seed, params=None, key="bonafide"):
    """One bonafide waveform, a pure function of ``(seed, key, params)``."""
    rng = utt_rng(seed, key)
    v = _draw_voice(rng, params or BonafideParams())
    return _normalize(_synthesize(v, rng), v.peak)


# -- spoof families ----------------------------------------------------------

def _stft(x, nperseg=512):
    return signal.stft(x, nperseg=nperseg, noverlap=nperseg * 3 // 4)[2]


def _istft(z, n, nperseg=512):
    y = signal.istft(z, nperseg=nperseg, noverlap=nperseg * 3 // 4)[1]
    if len(y) < n:
        y = np.pad(y, (0, n - len(y)))
    return y[:n]


def _phase_randomize(x, rng, nperseg=128):
    z = _stft(x, nperseg)
    phase = rng.uniform(-np.pi, np.pi, size=z.shape)
    return _istft(np.abs(z) * np.exp(1j * phase), len(x), nperseg)


def _magnitude_quantize(x, rng, band=8, step_db=6.0):
    z = _stft(x)
    mag = np.abs(z)
    # coarse vocoder bands: one shared magnitude per group of ``band`` bins
    n = mag.shape[0] - mag.shape[0] % band
    coarse = mag[:n].reshape(n // band, band, -1).mean(axis=1)
    mag[:n] = np.repeat(coarse, band, axis=0)
    db = 20 * np.log10(mag + 1e-10)
    q = step_db * np.round(db / step_db + rng.uniform(-0.5, 0.5))
    return _istft(10 ** (q / 20) * np.exp(1j * np.angle(z)), len(x))


def _clip_compand(x, rng, bits=6, mu=255.0):
    x = x / (np.max(np.abs(x)) + 1e-12)
    x = np.clip(x * rng.uniform(2.0, 3.5), -1.0, 1.0)
    c = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    levels = 2 ** (bits - 1)
    c = np.round(c * levels) / levels
    return np.sign(c) * ((1 + mu) ** np.abs(c) - 1) / mu


def _time_smear(x, rng, frame=320, hop=80, reach=240):
    win = np.hanning(frame)
    out = np.zeros(len(x) + frame)
    norm = np.zeros(len(x) + frame)
    padded = np.pad(x, (reach, reach + frame))
    for start in range(0, len(x), hop):
        src = start + reach + int(rng.integers(-reach, reach + 1))
        out[start:start + frame] += padded[src:src + frame] * win
        norm[start:start + frame] += win
    return (out / np.maximum(norm, 1e-3))[: len(x)]


def _inharmonic_tones(x, rng):
    n = len(x)
    t = np.arange(n) / SAMPLE_RATE
    env = np.abs(signal.hilbert(x))
    env = np.convolve(env, np.ones(400) / 400, mode="same")
    tones = np.zeros(n)
    for _ in range(int(rng.integers(3, 7))):
        f = rng.uniform(400.0, 6000.0)
        tones += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    tones *= env
    gain = np.sqrt(np.mean(x**2) / (np.mean(tones**2) + 1e-20))
    return x + tones * gain * 10 ** (-rng.uniform(6.0, 12.0) / 20)


def _band_limit(x, rng, cutoff=3000.0, bits=10):
    sos = signal.butter(10, cutoff, fs=SAMPLE_RATE, output="sos")
    y = signal.sosfiltfilt(sos, x)
    y = y / (np.max(np.abs(y)) + 1e-12)
    levels = 2 ** (bits - 1)
    return np.round(y * levels) / levels


def gen_spoof(family, seed, params=None, key=None):
    """Spoofed waveform of attack ``family``, derived from a bonafide draw."""
    if family not in SEEN_FAMILIES + UNSEEN_FAMILIES:
        raise CorpusError(f"unknown attack family {family!r}")
    rng = utt_rng(seed, key or f"spoof-{family}")
    v = _draw_voice(rng, params or BonafideParams())
    if family == "A01":
        x = _synthesize(v, rng, constant_pitch=True)
    elif family == "U03":
        x = _synthesize(v, rng, formant_scale=8.0)
    else:
        x = _synthesize(v, rng)
        transform = {
            "A02": _phase_randomize,
            "A03": _magnitude_quantize,
            "A04": _clip_compand,
            "U01": _time_smear,
            "U02": _inharmonic_tones,
            "U04": _band_limit,
        }[family]
        x = transform(x, rng)
    return _normalize(x, v.peak)


# -- non-speech trimming -----------------------------------------------------

def trim_nonspeech(utt, threshold_db=-30.0, frame_ms=25.0, hop_ms=10.0, min_duration=0.2):
    """Drop leading/trailing frames whose RMS is below ``threshold_db`` re. the loudest frame."""
    x = utt.samples if isinstance(utt, Utterance) else np.asarray(utt, dtype=np.float64)
    frame = int(SAMPLE_RATE * frame_ms / 1000)
    hop = int(SAMPLE_RATE * hop_ms / 1000)
    if len(x) < frame:
        raise TrimError("utterance shorter than one analysis frame")
    win = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    rms = np.sqrt(np.mean(win**2, axis=1))
    peak = rms.max()
    if peak <= 1e-9:
        raise TrimError("utterance is entirely silent")
    active = np.flatnonzero(20 * np.log10(np.maximum(rms, 1e-300) / peak) >= threshold_db)
    # cut half a hop either side of the outermost active frame centres, so a
    # frame that only partly overlaps speech does not keep all of its silence
    first, last = active[0], active[-1]
    start = 0 if first == 0 else first * hop + (frame - hop) // 2
    end = len(x) if last == len(rms) - 1 else min(last * hop + (frame + hop) // 2, len(x))
    need = int(round(min_duration * SAMPLE_RATE))
    if end - start < need:
        if len(x) < need:
            raise TrimError(f"less than {min_duration} s of audio remains after trimming")
        mid = (start + end) // 2
        start = min(max(mid - need // 2, 0), len(x) - need)
        end = start + need
    out = x[start:end].copy()
    if isinstance(utt, Utterance):
        return Utterance(utt.utt_id, out, utt.label, utt.attack_id)
    return out


# -- corpus assembly ---------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    """Per-split counts; spoof counts are per attack family."""

    train_bonafide: int = 400
    train_spoof_per_family: int = 100
    dev_bonafide: int = 100
    dev_spoof_per_family: int = 25
    eval_seen_bonafide: int = 200
    eval_seen_spoof_per_family: int = 50
    eval_unseen_bonafide: int = 200
    eval_unseen_spoof_per_family: int = 50
    voice: BonafideParams = field(default_factory=BonafideParams)

    def plan(self, split):
        families = UNSEEN_FAMILIES if split == "eval_unseen" else SEEN_FAMILIES
        n_bona = getattr(self, f"{split}_bonafide")
        n_per = getattr(self, f"{split}_spoof_per_family")
        return [(BONAFIDE, "-")] * n_bona + [
            (SPOOF, fam) for fam in families for _ in range(n_per)
        ]


@dataclass
class Corpus:
    splits: dict

    def protocol(self, split):
        return [ProtocolEntry(u.utt_id, u.attack_id, u.label) for u in self.splits[split]]

    def __len__(self):
        return sum(len(v) for v in self.splits.values())


def make_utterance(utt_id, label, attack_id, seed, params=None):
    if label == BONAFIDE:
        x = gen_bonafide(seed, params, key=utt_id)
    else:
        x = gen_spoof(attack_id, seed, params, key=utt_id)
    return Utterance(utt_id, x, label, attack_id)


def build_corpus(config=None, seed=0):
    """Generate every split; pure function of ``(config, seed)``."""
    config = config or CorpusConfig()
    splits = {}
    seen_ids = set()
    for split in SPLITS:
        plan = config.plan(split)
        order = utt_rng(seed, f"order-{split}").permutation(len(plan))
        utts = []
        for i, j in enumerate(order):
            label, attack = plan[j]
            utt_id = f"{split}_{i:05d}"
            if utt_id in seen_ids:
                raise CorpusError(f"duplicate utt_id {utt_id}")
            seen_ids.add(utt_id)
            utts.append(make_utterance(utt_id, label, attack, seed, config.voice))
        splits[split] = utts
    check_family_disjoint(splits)
    return Corpus(splits)


def check_family_disjoint(splits):
    train_side = {u.attack_id for s in ("train", "dev") if s in splits for u in splits[s]}
    unseen = {u.attack_id for u in splits.get("eval_unseen", [])}
    leaked = (train_side & unseen) - {"-"}
    if leaked:
        raise CorpusError(f"attack families shared by train/dev and eval_unseen: {sorted(leaked)}")


# -- file formats ------------------------------------------------------------

def atomic_write(path, data):
    """Write bytes or text via a temp file and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def wav_bytes(samples):
    import io

    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, samples):
    atomic_write(path, wav_bytes(samples))


def read_wav(path):
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise CorpusError(f"{path}: expected 16-bit mono PCM")
        if w.getframerate() != SAMPLE_RATE:
            raise CorpusError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()}")
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0


def format_protocol(entries):
    return "".join(e.line() for e in entries)


def parse_protocol(text, source="<protocol>"):
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in (BONAFIDE, SPOOF):
            raise CorpusError(f"{source}:{lineno}: malformed protocol line {line!r}")
        entries.append(ProtocolEntry(*parts))
    return entries


def read_protocol(path):
    return parse_protocol(Path(path).read_text(encoding="utf-8"), str(path))


def protocol_path(root, split):
    return Path(root) / "protocols" / f"{split}.txt"


def write_corpus(corpus, root):
    root = Path(root)
    for split, utts in corpus.splits.items():
        for u in utts:
            write_wav(root / "wav" / f"{u.utt_id}.wav", u.samples)
        atomic_write(protocol_path(root, split), format_protocol(corpus.protocol(split)))


def load_split(root, split):
    """Read a split back as :class:`Utterance` objects in protocol order."""
    root = Path(root)
    return [
        Utterance(e.utt_id, read_wav(root / "wav" / f"{e.utt_id}.wav"), e.label, e.attack_id)
        for e in read_protocol(protocol_path(root, split))
    ]
