import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selfaugment.contrastive import MocoConfig, train_moco
from selfaugment.dataio import gen_noise, gen_synthetic
from selfaugment.nn import EncoderConfig, SgdConfig, build_encoder
from selfaugment.sseval import (
    JIGSAW,
    JIGSAW_PERMUTATIONS,
    ROTATION,
    ProbeConfig,
    ProbeTask,
    TaskKind,
    extract_features,
    jigsaw_batch,
    permute_quadrants,
    rotate_batch,
    rotation_loss,
    supervised_task,
    train_probe,
)

square_st = st.integers(1, 6).flatmap(lambda n: arrays(np.float32, (2, 3, n, n), elements=st.floats(0, 1, width=32)))


def test_rotation_label_one_is_quarter_turn_ccw():
    a, b, c, d = 0.1, 0.2, 0.3, 0.4
    img = np.array([[[[a, b], [c, d]]]], np.float32)
    out, labels = rotate_batch(img)
    assert labels.tolist() == [0, 1, 2, 3]
    np.testing.assert_array_equal(out[0, 0], img[0, 0])
    np.testing.assert_array_equal(out[1, 0], np.array([[b, d], [a, c]], np.float32))
    np.testing.assert_array_equal(out[2, 0], np.array([[d, c], [b, a]], np.float32))


@given(square_st)
def test_rotations_form_z4(imgs):
    out, labels = rotate_batch(imgs)
    n = len(imgs)
    assert out.shape == (4 * n, *imgs.shape[1:])
    np.testing.assert_array_equal(out[:n], imgs)
    turned = [out[r * n:(r + 1) * n] for r in range(4)]
    for r1 in range(4):
        again = rotate_batch(turned[r1])[0]
        for r2 in range(4):
            np.testing.assert_array_equal(again[r2 * n:(r2 + 1) * n], turned[(r1 + r2) % 4])
    x = imgs
    for _ in range(4):
        x = rotate_batch(x)[0][n:2 * n]
    np.testing.assert_array_equal(x, imgs)


def test_rotation_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        rotate_batch(np.zeros((1, 3, 4, 6), np.float32))


def test_jigsaw_permutation_table():
    assert len(JIGSAW_PERMUTATIONS) == 24 and len(set(JIGSAW_PERMUTATIONS)) == 24
    assert list(JIGSAW_PERMUTATIONS) == sorted(JIGSAW_PERMUTATIONS)
    assert JIGSAW_PERMUTATIONS[0] == (0, 1, 2, 3)


def test_jigsaw_identity_and_swap():
    blocks = np.zeros((1, 4, 4), np.float32)
    blocks[:, :2, :2], blocks[:, :2, 2:], blocks[:, 2:, :2], blocks[:, 2:, 2:] = 1, 2, 3, 4
    np.testing.assert_array_equal(permute_quadrants(blocks, JIGSAW_PERMUTATIONS[0]), blocks)
    swap = JIGSAW_PERMUTATIONS.index((1, 0, 2, 3))
    assert swap == 6
    out = permute_quadrants(blocks, JIGSAW_PERMUTATIONS[swap])
    assert out[0, 0, 0] == 2 and out[0, 0, 3] == 1 and out[0, 3, 0] == 3 and out[0, 3, 3] == 4


def test_jigsaw_labels_uniform():
    imgs = np.zeros((10_000, 1, 2, 2), np.float32)
    _, labels = jigsaw_batch(imgs, np.random.default_rng(0))
    counts = np.bincount(labels, minlength=24)
    expected = 10_000 / 24
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 49.7  # 0.999 quantile with 23 degrees of freedom


def test_jigsaw_labels_match_content():
    imgs = np.random.default_rng(1).random((20, 3, 6, 6)).astype(np.float32)
    out, labels = jigsaw_batch(imgs, np.random.default_rng(2))
    for img, o, l in zip(imgs, out, labels):
        np.testing.assert_array_equal(o, permute_quadrants(img, JIGSAW_PERMUTATIONS[l]))


def test_jigsaw_rejects_odd():
    with pytest.raises(ValueError, match="even"):
        jigsaw_batch(np.zeros((1, 3, 5, 4), np.float32), np.random.default_rng(0))


def test_task_invariants():
    assert ROTATION.num_classes == 4 and JIGSAW.num_classes == 24
    assert supervised_task(10).kind is TaskKind.SUPERVISED
    with pytest.raises(ValueError):
        ProbeTask(TaskKind.ROTATION, 5)


# -- probes -------------------------------------------------------------------------------


FAST = ProbeConfig(epochs=30, sgd=SgdConfig(0.1, 0.9, 0.0, ((20, 0.1),)))


def test_random_encoder_on_noise_is_at_chance():
    enc = build_encoder(EncoderConfig(), 0)
    data = gen_noise(800, (16, 16), seed=0)
    res = train_probe(enc, ROTATION, data.images, FAST, seed=0)
    assert abs(res.top1 - 0.25) <= 0.05, res.top1


def test_backbone_frozen_and_probe_linear():
    enc = build_encoder(EncoderConfig(), 1)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    data = gen_synthetic(2, 24, (8, 8), seed=0)
    for task in (ROTATION, JIGSAW, supervised_task(2)):
        res = train_probe(enc, task, data.images, FAST, seed=0, labels=data.labels)
        assert res.head.num_trainable() == task.num_classes * (enc.cfg.feat_dim + 1)
        assert isinstance(res.head.head, torch.nn.Linear)
        assert 0.0 <= res.top1 <= 1.0 and np.isfinite(res.eval_loss)
    after = enc.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_supervised_probe_memorizes_32_samples():
    enc = build_encoder(EncoderConfig(), 2)
    imgs = np.random.default_rng(3).random((32, 3, 8, 8)).astype(np.float32)
    labels = np.arange(32) % 4
    cfg = ProbeConfig(epochs=300, batch_size=32, sgd=SgdConfig(0.5, 0.9, 0.0))
    res = train_probe(enc, supervised_task(4), imgs, cfg, 0, labels=labels, eval_images=imgs, eval_labels=labels)
    assert res.top1 == 1.0


def test_trained_encoder_decodes_rotation():
    data = gen_synthetic(4, 64, (16, 16), seed=0)
    cfg = MocoConfig(queue_size=64, batch_size=32, epochs=10, sgd=SgdConfig(0.06, 0.9, 1e-4))
    state, _ = train_moco(data.unlabeled(), None, cfg, 0)
    res = train_probe(state.query, ROTATION, data.images, FAST, seed=0)
    assert res.top1 > 0.6, res.top1
    loss, top1 = rotation_loss(state.query, res.head, data.images[:32])
    assert np.isfinite(loss) and 0 <= top1 <= 1


def test_probe_errors():
    enc = build_encoder(EncoderConfig(), 0)
    with pytest.raises(ValueError):
        train_probe(enc, ROTATION, np.zeros((0, 3, 8, 8), np.float32), FAST, 0)
    with pytest.raises(ValueError):
        train_probe(enc, supervised_task(3), np.zeros((8, 3, 8, 8), np.float32), FAST, 0)


def test_features_deterministic_and_eval_mode():
    enc = build_encoder(EncoderConfig(), 0)
    x = np.random.default_rng(0).random((5, 3, 8, 8)).astype(np.float32)
    a, b = extract_features(enc, x), extract_features(enc, x)
    assert torch.equal(a, b) and a.shape == (5, enc.cfg.feat_dim)
    assert enc.training
