import numpy as np
import pytest

from ockd.autodiff import ShapeError, Tensor
from ockd.distill import (
    DegenerateEmbeddingError,
    DistillConfig,
    OneClassViolation,
    TrainSettings,
    check_bonafide_only,
    crop_or_pad,
    distill_student,
    epoch_learning_rate,
    init_student,
    loss_cos,
    loss_mse,
    loss_total,
    make_batch,
    train_teacher,
    weighted_cross_entropy,
)
from ockd.models import BACKEND, Encoder, EncoderConfig, HiddenStack, layer_map

TEACHER = EncoderConfig(num_layers=4, d_model=8, n_heads=2, ff_dim=16,
                        frontend_frame=64, frontend_stride=32)


def random_stack(rng, n_layers, batch=3, d=5):
    return HiddenStack([rng.standard_normal((batch, d)) for _ in range(n_layers)],
                       rng.standard_normal((batch, d)))


# -- losses ------------------------------------------------------------------

def test_mse_examples(rng):
    assert float(loss_mse([[1.0, 0.0]], [[0.0, 0.0]]).data) == 1.0
    x = rng.standard_normal((4, 3))
    assert float(loss_mse(x, x).data) == 0.0


def test_mse_matches_loop(rng):
    t, s = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    ref = 0.0
    for i in range(6):
        ref += sum((t[i, j] - s[i, j]) ** 2 for j in range(5))
    assert abs(float(loss_mse(t, s).data) - ref / 6) <= 1e-12


def test_cos_examples():
    assert float(loss_cos([[1.0, 0.0]], [[0.0, 1.0]]).data) == pytest.approx(1.0, abs=1e-15)
    assert float(loss_cos([[1.0, 0.0]], [[-1.0, 0.0]]).data) == pytest.approx(2.0, abs=1e-15)


def test_cos_scale_invariant_mse_not(rng):
    t = rng.standard_normal((4, 3))
    assert float(loss_cos(t, 2.5 * t).data) == pytest.approx(0.0, abs=1e-15)
    a = rng.uniform(0.5, 3, size=(4, 1))
    s = rng.standard_normal((4, 3))
    assert float(loss_cos(t, s).data) == pytest.approx(float(loss_cos(t * a, s).data), abs=1e-12)
    assert float(loss_mse(t, s).data) != pytest.approx(float(loss_mse(t * a, s).data))


def test_cos_range_1000_batches():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n, d = rng.integers(1, 9), rng.integers(1, 9)
        value = float(loss_cos(rng.standard_normal((n, d)), rng.standard_normal((n, d))).data)
        assert 0.0 <= value <= 2.0


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_mse(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        loss_cos(np.ones((2, 3)), np.ones((3, 3)))


def test_cos_degenerate_names_batch_index():
    t = np.ones((3, 2))
    s = np.ones((3, 2))
    s[2] = 0.0
    with pytest.raises(DegenerateEmbeddingError, match="batch index 2"):
        loss_cos(t, s)


def test_total_zero_when_copied(rng):
    lmap = layer_map(12, 4)
    t = random_stack(rng, 12)
    s = HiddenStack([rng.standard_normal((3, 5)) for _ in range(4)], t.backend_embedding.copy())
    for si, ti in lmap.pairs:
        s.layer_embeddings[si - 1] = t.get(ti).copy()
    rep = loss_total(t, s, lmap)
    assert rep.l_cos <= 1e-12 and rep.l_mse <= 1e-12 and rep.l_total <= 1e-12


@pytest.mark.parametrize("lam", [0.0, 1e-5, 1.0])
def test_total_identity(rng, lam):
    t, s = random_stack(rng, 24), random_stack(rng, 8)
    rep = loss_total(t, s, layer_map(24, 8), lam=lam)
    assert abs(rep.l_total - (rep.l_cos + lam * rep.l_mse)) <= 1e-12
    assert abs(float(rep.loss.data) - rep.l_total) <= 1e-12
    if lam == 0.0:
        assert rep.l_total == rep.l_cos


def test_five_pairs_weighted_equally(rng):
    t, s = random_stack(rng, 24), random_stack(rng, 8)
    lmap = layer_map(24, 8)
    rep = loss_total(t, s, lmap)
    cos = [float(loss_cos(t.get(ti), s.get(si)).data) for si, ti in lmap.all_pairs()]
    mse = [float(loss_mse(t.get(ti), s.get(si)).data) for si, ti in lmap.all_pairs()]
    assert len(cos) == 5
    assert abs(rep.l_cos - (cos[0] + cos[1] + cos[2] + cos[3] + cos[4]) / 5) <= 1e-12
    assert abs(rep.l_mse - (mse[0] + mse[1] + mse[2] + mse[3] + mse[4]) / 5) <= 1e-12
    assert set(rep.per_pair_cos) == set(lmap.all_pairs())


def test_single_objectives(rng):
    t, s = random_stack(rng, 12), random_stack(rng, 4)
    lmap = layer_map(12, 4)
    rep_mse = loss_total(t, s, lmap, objective="mse")
    rep_cos = loss_total(t, s, lmap, objective="cos")
    assert float(rep_mse.loss.data) == rep_mse.l_mse
    assert float(rep_cos.loss.data) == rep_cos.l_cos


def test_missing_layer_is_error(rng):
    t, s = random_stack(rng, 4), random_stack(rng, 4)
    with pytest.raises(KeyError, match="layer 6"):
        loss_total(t, s, layer_map(12, 4))


def test_weighted_ce_hand_value():
    loss = weighted_cross_entropy(Tensor([[0.0, 0.0]]), np.array([1]))
    assert float(loss.data) == pytest.approx(0.9 * np.log(2), abs=1e-15)
    loss = weighted_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
    assert float(loss.data) == pytest.approx(0.1 * np.log(2), abs=1e-15)


# -- batching ----------------------------------------------------------------

def test_crop_or_pad(rng):
    x = np.arange(10.0)
    assert len(crop_or_pad(x, 4, rng)) == 4
    np.testing.assert_array_equal(crop_or_pad(x[:3], 7, rng), [0, 1, 2, 0, 1, 2, 0])


def test_batch_randomness_keyed_by_utterance():
    waves = [np.random.default_rng(i).standard_normal(200) for i in range(4)]
    s = TrainSettings(crop_samples=50, augment=True, seed=1)
    a = make_batch(waves, [0, 2], 3, s)
    b = make_batch(waves, [2, 0], 3, s)
    np.testing.assert_array_equal(a[0], b[1])
    np.testing.assert_array_equal(a[1], b[0])


def test_cosine_schedule():
    s = TrainSettings(epochs=4, learning_rate=1.0)
    rates = [epoch_learning_rate(s, e) for e in range(1, 5)]
    assert rates[0] == 1.0 and all(a > b for a, b in zip(rates, rates[1:])) and rates[-1] > 0
    const = TrainSettings(epochs=4, learning_rate=0.5, lr_schedule="constant")
    assert {epoch_learning_rate(const, e) for e in range(1, 5)} == {0.5}


def test_settings_validation():
    with pytest.raises(ValueError):
        TrainSettings(batch_size=0)
    with pytest.raises(ValueError):
        TrainSettings(lr_schedule="step")
    with pytest.raises(ValueError):
        DistillConfig(lam=-1.0)


# -- training loops ----------------------------------------------------------

def toy_data(n=12, length=400):
    rng = np.random.default_rng(0)
    t = np.arange(length) / 16000
    waves, labels = [], []
    for i in range(n):
        bona = i % 2 == 1
        f = rng.uniform(150, 250)
        x = np.sin(2 * np.pi * f * t) + 0.05 * rng.standard_normal(length)
        if not bona:
            x = np.clip(3 * x, -1, 1)  # clipped harmonics mark the spoof class
        waves.append(x)
        labels.append(int(bona))
    return waves, np.array(labels)


def fit_teacher(seed=0, epochs=3):
    waves, labels = toy_data()
    model = Encoder(TEACHER, seed=seed)
    s = TrainSettings(epochs=epochs, batch_size=4, crop_samples=256, seed=seed)
    return model, train_teacher(waves, labels, model, s)


def test_teacher_loss_decreases_and_logs():
    _, hist = fit_teacher(epochs=4)
    assert hist.losses[-1] <= hist.losses[0]
    lines = hist.to_text().splitlines()
    assert len(lines) == 4 and len(lines[0].split("\t")) == 3


def test_teacher_deterministic():
    a, _ = fit_teacher(seed=5, epochs=2)
    b, _ = fit_teacher(seed=5, epochs=2)
    assert a.digest() == b.digest()


def test_teacher_rejects_single_class():
    waves, _ = toy_data()
    with pytest.raises(ValueError, match="both"):
        train_teacher(waves, np.ones(len(waves), int), Encoder(TEACHER), TrainSettings(epochs=1))


def test_distill_freezes_teacher_and_learns():
    teacher, _ = fit_teacher()
    digest = teacher.digest()
    waves, labels = toy_data()
    bona = [w for w, y in zip(waves, labels) if y == 1]
    student = init_student(teacher, TEACHER.student(2), seed=1)
    cfg = DistillConfig(settings=TrainSettings(epochs=4, batch_size=3, crop_samples=256))
    hist = distill_student(bona, teacher, student, cfg)
    assert teacher.digest() == digest
    assert hist.losses[-1] < hist.losses[0]


@pytest.mark.parametrize("objective, lam", [("mse", 1e-5), ("total", 0.0)])
def test_ablation_variants_train(objective, lam):
    teacher, _ = fit_teacher(epochs=1)
    waves, labels = toy_data()
    bona = [w for w, y in zip(waves, labels) if y == 1]
    student = init_student(teacher, TEACHER.student(2), seed=1)
    cfg = DistillConfig(lam=lam, objective=objective,
                        settings=TrainSettings(epochs=1, batch_size=3, crop_samples=256))
    hist = distill_student(bona, teacher, student, cfg)
    assert np.isfinite(hist.losses[-1])


def test_distill_rejects_spoof_by_name():
    teacher, _ = fit_teacher(epochs=1)
    waves, labels = toy_data(4)
    ids = ["u0", "u1", "u2", "u3"]
    student = Encoder(TEACHER.student(2))
    with pytest.raises(OneClassViolation, match="u0"):
        distill_student(waves, teacher, student, DistillConfig(), labels=labels, utt_ids=ids)


def test_check_bonafide_only_accepts_bonafide():
    check_bonafide_only([1, 1, 1])
    with pytest.raises(OneClassViolation, match="index 1"):
        check_bonafide_only([1, 0])


def test_distill_rejects_incompatible_student():
    teacher = Encoder(TEACHER)
    other = EncoderConfig(num_layers=2, d_model=4, n_heads=2, ff_dim=16,
                          frontend_frame=64, frontend_stride=32, num_classes=None)
    with pytest.raises(ValueError, match="d_model"):
        distill_student([np.zeros(300)], teacher, Encoder(other), DistillConfig())


def test_student_init_modes():
    teacher = Encoder(TEACHER, seed=0)
    cfg = TEACHER.student(2)
    front = init_student(teacher, cfg, seed=1, copy="frontend")
    assert np.array_equal(front.params["frontend.weight"].data, teacher.params["frontend.weight"].data)
    assert not np.array_equal(front.params["layers.0.ff1.weight"].data,
                              teacher.params["layers.1.ff1.weight"].data)
    mapped = init_student(teacher, cfg, seed=1, copy="mapped")
    # student layer 2 starts as teacher layer 4 (ratio 2)
    assert np.array_equal(mapped.params["layers.1.ff1.weight"].data,
                          teacher.params["layers.3.ff1.weight"].data)
    rand = init_student(teacher, cfg, seed=1, copy="random")
    assert not np.array_equal(rand.params["frontend.weight"].data, teacher.params["frontend.weight"].data)
    with pytest.raises(ValueError):
        init_student(teacher, cfg, copy="all")


def test_copied_embeddings_give_unit_similarity():
    from ockd.metrics import score_utterance

    teacher = Encoder(TEACHER, seed=0)
    # same weights without the head: every mapped pair is reproduced exactly
    twin = Encoder(TEACHER.student(4), params={
        k: Tensor(v.data.copy()) for k, v in teacher.params.items() if not k.startswith("head")
    })
    x = np.random.default_rng(0).standard_normal(600)
    assert score_utterance(teacher, twin, x) == pytest.approx(1.0, abs=1e-9)
    other = init_student(teacher, TEACHER.student(2), seed=3)
    assert -1.0 <= score_utterance(teacher, other, x) <= 1.0


def test_backend_pair_present():
    assert (BACKEND, BACKEND) in layer_map(4, 2).all_pairs()
