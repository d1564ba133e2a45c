import numpy as np
import pytest

from ockd.corpus import (
    BONAFIDE,
    SAMPLE_RATE,
    SEEN_FAMILIES,
    SPLITS,
    SPOOF,
    UNSEEN_FAMILIES,
    CorpusConfig,
    CorpusError,
    TrimError,
    Utterance,
    build_corpus,
    check_family_disjoint,
    format_protocol,
    gen_bonafide,
    gen_spoof,
    load_split,
    parse_protocol,
    protocol_path,
    read_wav,
    trim_nonspeech,
    write_corpus,
    write_wav,
)

SMALL = CorpusConfig(
    train_bonafide=4, train_spoof_per_family=1,
    dev_bonafide=2, dev_spoof_per_family=1,
    eval_seen_bonafide=2, eval_seen_spoof_per_family=1,
    eval_unseen_bonafide=2, eval_unseen_spoof_per_family=1,
)


def pitch_periods(x, frame=800, hop=400, lo=40, hi=400):
    """Autocorrelation pitch period (samples) of every loud frame."""
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    rms = np.sqrt(np.mean(frames**2, axis=1))
    out = []
    for f in frames[rms > 0.3 * rms.max()]:
        f = f - f.mean()
        ac = np.correlate(f, f, mode="full")[frame - 1:]
        lag = lo + int(np.argmax(ac[lo:hi]))
        # parabolic refinement around the peak
        a, b, c = ac[lag - 1], ac[lag], ac[lag + 1]
        out.append(lag + 0.5 * (a - c) / (a - 2 * b + c))
    return np.array(out)


def test_bonafide_deterministic_and_bounded():
    a, b = gen_bonafide(7), gen_bonafide(7)
    assert np.array_equal(a, b)
    assert np.max(np.abs(a)) <= 1.0
    assert 1.0 <= len(a) / SAMPLE_RATE <= 4.0


def test_different_seeds_differ():
    assert not np.array_equal(gen_bonafide(1), gen_bonafide(2))


@pytest.mark.parametrize("family", SEEN_FAMILIES + UNSEEN_FAMILIES)
def test_spoof_deterministic(family):
    a, b = gen_spoof(family, 5), gen_spoof(family, 5)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a)) and np.max(np.abs(a)) <= 1.0


def test_unknown_family_rejected():
    with pytest.raises(CorpusError, match="Z99"):
        gen_spoof("Z99", 0)


@pytest.mark.parametrize("seed", range(5))
def test_a01_pitch_period_is_constant(seed):
    periods = pitch_periods(gen_spoof("A01", seed))
    assert len(periods) >= 5
    assert periods.std() < 1.0


def test_bonafide_pitch_varies():
    # the tracker is sensitive enough to see natural pitch movement
    stds = [pitch_periods(gen_bonafide(s)).std() for s in range(5)]
    assert max(stds) > 1.0


@pytest.mark.parametrize("seed", range(5))
def test_u04_has_no_energy_above_4khz(seed):
    x = gen_spoof("U04", seed)
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), 1 / SAMPLE_RATE)
    assert power[freqs > 4000].sum() / power.sum() < 0.01


@pytest.mark.parametrize("seed", range(5))
def test_leading_silence(seed):
    x = gen_bonafide(seed)
    n = len(x)
    lead = np.sqrt(np.mean(x[: SAMPLE_RATE // 10] ** 2))
    mid = np.sqrt(np.mean(x[n // 2 - 800: n // 2 + 800] ** 2))
    assert lead < 0.1 * mid


def _padded_tone(pad_s=0.2, body_s=1.0):
    t = np.arange(int(body_s * SAMPLE_RATE)) / SAMPLE_RATE
    body = 0.5 * np.sin(2 * np.pi * 220 * t)
    pad = np.zeros(int(pad_s * SAMPLE_RATE))
    return Utterance("u", np.concatenate([pad, body, pad]))


def test_trim_removes_padding():
    utt = _padded_tone(0.2)
    trimmed = trim_nonspeech(utt)
    shortened = utt.duration_s - trimmed.duration_s
    assert abs(shortened - 0.4) <= 0.025


def test_trim_keeps_unpadded_length():
    utt = _padded_tone(0.0)
    assert len(trim_nonspeech(utt).samples) == len(utt.samples)


def test_trim_silence_is_error():
    with pytest.raises(TrimError):
        trim_nonspeech(Utterance("s", np.zeros(SAMPLE_RATE)))


def test_trim_keeps_interior_silence():
    t = np.arange(SAMPLE_RATE // 2) / SAMPLE_RATE
    burst = 0.5 * np.sin(2 * np.pi * 300 * t)
    x = np.concatenate([burst, np.zeros(SAMPLE_RATE // 2), burst])
    out = trim_nonspeech(Utterance("g", x))
    assert len(out.samples) == len(x)


def test_trim_returns_at_least_200ms():
    t = np.arange(SAMPLE_RATE // 20) / SAMPLE_RATE  # a 50 ms click of tone
    x = np.concatenate([np.zeros(SAMPLE_RATE), 0.5 * np.sin(2 * np.pi * 300 * t),
                        np.zeros(SAMPLE_RATE)])
    out = trim_nonspeech(Utterance("c", x))
    assert out.duration_s >= 0.2 - 1e-9


def test_default_corpus_shape():
    cfg = CorpusConfig()
    counts = {s: len(cfg.plan(s)) for s in SPLITS}
    assert counts == {"train": 800, "dev": 200, "eval_seen": 400, "eval_unseen": 400}
    assert sum(counts.values()) == 1800
    attacks = {a for s in SPLITS for _, a in cfg.plan(s)} - {"-"}
    assert len(attacks) == 8
    assert {a for _, a in cfg.plan("eval_unseen")} == set(UNSEEN_FAMILIES) | {"-"}


def test_small_corpus_invariants():
    corpus = build_corpus(SMALL, seed=3)
    ids = [u.utt_id for s in SPLITS for u in corpus.splits[s]]
    assert len(ids) == len(set(ids))
    assert not any(u.attack_id.startswith("A") for u in corpus.splits["eval_unseen"])
    for s in ("train", "dev"):
        assert not any(u.attack_id.startswith("U") for u in corpus.splits[s])
    labels = {u.label for u in corpus.splits["train"]}
    assert labels == {BONAFIDE, SPOOF}


def test_family_leak_detected():
    corpus = build_corpus(SMALL, seed=3)
    corpus.splits["train"][0].attack_id = "U01"
    with pytest.raises(CorpusError, match="U01"):
        check_family_disjoint(corpus.splits)


def test_written_corpus_round_trips(tmp_path):
    corpus = build_corpus(SMALL, seed=3)
    write_corpus(corpus, tmp_path / "a")
    write_corpus(build_corpus(SMALL, seed=3), tmp_path / "b")
    for split in SPLITS:
        pa, pb = protocol_path(tmp_path / "a", split), protocol_path(tmp_path / "b", split)
        assert pa.read_bytes() == pb.read_bytes()
        back = load_split(tmp_path / "a", split)
        for orig, got in zip(corpus.splits[split], back):
            assert (orig.utt_id, orig.label, orig.attack_id) == (got.utt_id, got.label, got.attack_id)
            # at most one 16-bit step of error
            assert np.max(np.abs(orig.samples - got.samples)) <= 1.0 / 32767 + 1e-12
    wavs = list((tmp_path / "a" / "wav").glob("*.wav"))
    assert len(wavs) == len(corpus)


def test_wav_round_trip_extremes(tmp_path):
    x = np.array([-1.0, -0.5, 0.0, 1e-6, 0.5, 1.0])
    write_wav(tmp_path / "x.wav", x)
    assert np.max(np.abs(read_wav(tmp_path / "x.wav") - x)) <= 1.0 / 32767


def test_protocol_format_and_errors():
    entries = parse_protocol("a - bonafide\nb A01 spoof\n")
    assert format_protocol(entries) == "a - bonafide\nb A01 spoof\n"
    with pytest.raises(CorpusError, match=":2:"):
        parse_protocol("a - bonafide\nb A01 fake\n")
