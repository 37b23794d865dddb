import numpy as np
import pytest
from hypothesis import given, strategies as st

from hsjp.evaluation import evaluate_hsjp
from hsjp.heatmap import STRIDE, decode_peaks, masked_mse
from hsjp.imaging import AffineTransform
from hsjp.model import GROUPS, build_network, forward, set_freeze_prefix
from hsjp.puzzle import Permutation, cell_centers
from hsjp.rng import Rng, derive_seed
from hsjp.synthdata import DEFAULT_SKELETON, gen_keypoint_corpus, gen_pretext_corpus
from hsjp.train import (thread_limit, DESK_SCHEDULE, PAPER_SCHEDULE, AdamState, Schedule, TrainConfig,
                        adam_step, finetune, flip_keypoints, lr_at_epoch, make_hsjp_batch,
                        make_keypoint_batch, pretrain, subsample_labels, train_step)

TINY = dict(size=32, n=2, batch=4, epochs=2, milestones=(), eval_every=1)


@pytest.fixture(scope="module")
def images():
    return gen_pretext_corpus(12, 32, 3)


@pytest.fixture(scope="module")
def samples():
    return gen_keypoint_corpus(12, 32, 4)


# ----------------------------------------------------------------- schedule

@pytest.mark.parametrize("epoch,lr", [(0, 1e-3), (189, 1e-3), (190, 1e-4), (219, 1e-4),
                                      (220, 1e-5), (239, 1e-5)])
def test_long_schedule(epoch, lr):
    assert lr_at_epoch(PAPER_SCHEDULE, epoch) == lr


def test_desk_schedule():
    lrs = [lr_at_epoch(DESK_SCHEDULE, e) for e in range(40)]
    assert lrs == [1e-3] * 30 + [1e-4] * 6 + [1e-5] * 4


@pytest.mark.parametrize("epoch", [-1, 240])
def test_schedule_range(epoch):
    with pytest.raises(ValueError):
        lr_at_epoch(PAPER_SCHEDULE, epoch)


@pytest.mark.parametrize("milestones", [((5, 1e-4), (5, 1e-5)), ((10, 1e-4),), ((-1, 1e-4),)])
def test_bad_milestones(milestones):
    with pytest.raises(ValueError):
        Schedule(1e-3, milestones, 10)


# --------------------------------------------------------------------- adam

def test_adam_zero_gradient_noop():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_two_steps_by_hand():
    p = {"w": np.array([0.0])}
    s = AdamState()
    adam_step(p, {"w": np.array([1.0])}, s, 0.1)
    adam_step(p, {"w": np.array([1.0])}, s, 0.1)
    # step 1: m=0.1, v=0.001, m_hat=1, v_hat=1 -> -0.1/(1+1e-8)
    # step 2: m=0.19, v=0.001999, m_hat=0.19/0.19=1, v_hat=0.001999/0.001999=1
    m1, v1 = 0.1, 0.001
    th = -0.1 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    m2, v2 = 0.9 * m1 + 0.1, 0.999 * v1 + 0.001
    th -= 0.1 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert p["w"][0] == pytest.approx(th, abs=1e-15)
    assert p["w"][0] == pytest.approx(-0.2 / (1 + 1e-8), abs=1e-12)


def test_adam_one_call_equals_two_with_shared_t(gen):
    a, b = gen.standard_normal(3), gen.standard_normal((2, 2))
    ga, gb = gen.standard_normal(3), gen.standard_normal((2, 2))
    p1 = {"a": a.copy(), "b": b.copy()}
    adam_step(p1, {"a": ga, "b": gb}, AdamState(), 0.01)
    p2 = {"a": a.copy(), "b": b.copy()}
    s2 = AdamState()
    adam_step(p2, {"a": ga}, s2, 0.01)
    s2.t -= 1
    adam_step(p2, {"b": gb}, s2, 0.01)
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])


# ------------------------------------------------------------------ batches

def test_identity_batch_targets_on_lattice(images):
    cfg = TrainConfig(size=32, n=2, scale_aug=0, rotate_aug=0, translate_aug=0, color_aug=False)
    perms = [Permutation.identity(4)] * 3
    for augment in (False, True):
        x, t = make_hsjp_batch(images[:3], cfg, Rng(0), augment=augment, permutations=perms)
        assert x.shape == (3, 3, 32, 32) and t.data.shape == (3, 4, 8, 8)
        peaks = decode_peaks(t).points
        lattice = cell_centers(2, 32) / STRIDE
        assert np.abs(peaks - lattice).max() <= 0.5
        assert t.mask.all()


def test_translation_masks_exactly_one_channel(images):
    cfg = TrainConfig(size=96, n=2, color_aug=False)
    a = (AffineTransform.translation(0, -3)
         .compose(AffineTransform.rotation(45, (48, 48)))
         .compose(AffineTransform.scaling(1.35, (48, 48))))
    imgs = gen_pretext_corpus(1, 96, 0)
    _, t = make_hsjp_batch(imgs, cfg, Rng(0), permutations=[Permutation.identity(4)], transforms=[a])
    assert t.mask[0].tolist() == [False, True, True, True]
    assert not t.data[0, 0].any()


def test_batch_deterministic(images):
    cfg = TrainConfig(size=32, n=2)
    x1, t1 = make_hsjp_batch(images[:4], cfg, Rng(5))
    x2, t2 = make_hsjp_batch(images[:4], cfg, Rng(5))
    assert x1.tobytes() == x2.tobytes() and t1.data.tobytes() == t2.data.tobytes()


def test_concat_batch_has_six_channels(images):
    x, _ = make_hsjp_batch(images[:2], TrainConfig(size=32, n=2, concat_unshuffled=True), Rng(0))
    assert x.shape[1] == 6


def test_flip_keypoint_pixel_index():
    kps = np.zeros((13, 2))
    kps[1] = (10.5, 20.5)  # centre of pixel column 10
    vis = np.ones(13, bool)
    out, _ = flip_keypoints(kps, vis, 96)
    # pixel column 10 lands in column 96 - 1 - 10, under the mirrored identity
    partner = DEFAULT_SKELETON.flip_index[1]
    assert partner != 1
    assert tuple(out[partner]) == (96 - 1 - 10 + 0.5, 20.5)
    assert tuple(out[1]) == (96.0, 0.0)  # mirror of the partner, which sat at the origin


@given(st.integers(0, 2**32))
def test_flip_is_involution(seed):
    g = np.random.default_rng(seed)
    kps, vis = g.uniform(0, 96, (13, 2)), g.random(13) > 0.2
    k2, v2 = flip_keypoints(*flip_keypoints(kps, vis, 96), 96)
    np.testing.assert_allclose(k2, kps)
    np.testing.assert_array_equal(v2, vis)


def test_keypoint_batch_masks_invisible(samples):
    cfg = TrainConfig(size=32)
    x, t = make_keypoint_batch(samples[:4], cfg, Rng(0), augment=False)
    vis = np.stack([s.visible for s in samples[:4]])
    assert x.shape == (4, 3, 32, 32)
    assert not t.mask[~vis].any()


# -------------------------------------------------------------------- loops

def test_one_epoch_step_count():
    imgs = gen_pretext_corpus(10, 32, 1)
    cfg = TrainConfig(**{**TINY, "epochs": 1})
    r = pretrain(imgs[:8], cfg, heldout=imgs[8:])
    assert r.steps == 2
    assert np.isfinite(r.records[0].loss)
    assert len(r.log_text.splitlines()) == 1


def test_first_step_reduces_loss():
    imgs = gen_pretext_corpus(16, 32, 2)
    drops = []
    for seed in range(3):
        cfg = TrainConfig(size=32, n=2, seed=seed)
        state = build_network(32, 4, seed)
        x, t = make_hsjp_batch(imgs, cfg, Rng(seed))
        before = masked_mse(t, forward(state, x, keep_cache=False)[0])
        train_step(state, AdamState(), x, t, 1e-3)
        after = masked_mse(t, forward(state, x, keep_cache=False)[0])
        drops.append(before - after)
    assert np.mean(drops) > 0


def test_loss_decreases_over_fifty_steps():
    imgs = gen_pretext_corpus(64, 48, 7)
    improved = 0
    for seed in range(3):
        cfg = TrainConfig(size=48, n=2, seed=seed, batch=8)
        state = build_network(48, 4, seed)
        adam, rng = AdamState(), Rng(seed)
        losses = []
        for step in range(50):
            idx = rng.numpy().choice(len(imgs), 8, replace=False)
            x, t = make_hsjp_batch([imgs[i] for i in idx], cfg, rng)
            losses.append(train_step(state, adam, x, t, 1e-3))
        improved += np.mean(losses[-10:]) < np.mean(losses[:10])
    assert improved >= 2


def test_best_checkpoint_matches_max_precision(images):
    cfg = TrainConfig(**{**TINY, "epochs": 3})
    r = pretrain(images[:8], cfg, heldout=images[8:])
    scored = [rec for rec in r.records if rec.precision is not None]
    best = max(scored, key=lambda rec: (rec.precision, rec.accuracy))
    assert r.best_epoch == min(rec.epoch for rec in scored
                               if (rec.precision, rec.accuracy) == (best.precision, best.accuracy))
    rep = evaluate_hsjp(r.state, images[8:], 2, 32, cfg.match_eps, seed=derive_seed(cfg.seed, 4))
    assert (rep.precision, rep.patch_accuracy) == (best.precision, best.accuracy)


def test_pretrain_deterministic(images):
    cfg = TrainConfig(**TINY)
    a = pretrain(images[:8], cfg, heldout=images[8:])
    b = pretrain(images[:8], cfg, heldout=images[8:])
    assert a.log_text == b.log_text
    for k in a.state.params:
        assert a.state.params[k].tobytes() == b.state.params[k].tobytes()


def test_pretrain_respects_freeze(images):
    start = build_network(32, 4, 0)
    before = {k: v.copy() for k, v in start.params.items()}
    cfg = TrainConfig(**{**TINY, "epochs": 1, "freeze_depth": 3, "select": "final"})
    r = pretrain(images[:8], cfg, heldout=images[8:], state=start)
    changed = {k for k in before if not np.array_equal(before[k], r.state.params[k])}
    assert changed and changed <= set(r.state.trainable())
    assert all(k.split(".")[0] in GROUPS[3:] for k in changed)


def test_pretrain_concat_builds_six_channels(images):
    r = pretrain(images[:8], TrainConfig(**{**TINY, "epochs": 1, "concat_unshuffled": True}),
                 heldout=images[8:])
    assert r.state.in_channels == 6


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        pretrain([], TrainConfig(**TINY))


def test_finetune_head_contract(images, samples):
    pre = pretrain(images[:8], TrainConfig(**{**TINY, "epochs": 1}), heldout=images[8:]).state
    cfg = TrainConfig(size=32, epochs=1, batch=4, milestones=())
    for init in (None, pre):
        r = finetune(samples, init, cfg)
        assert r.state.head_channels == DEFAULT_SKELETON.n_keypoints


def test_finetune_all_but_head_keeps_backbone(images, samples):
    pre = build_network(32, 4, 0)
    cfg = TrainConfig(size=32, epochs=1, batch=4, milestones=(), freeze_depth=len(GROUPS) - 1)
    r = finetune(samples, pre, cfg)
    for k, v in pre.params.items():
        if not k.startswith("head"):
            assert r.state.params[k].tobytes() == v.tobytes()


def test_finetune_from_concat_checkpoint(samples):
    pre = build_network(32, 4, 0, in_channels=6)
    r = finetune(samples[:4], pre, TrainConfig(size=32, epochs=1, batch=4, milestones=()))
    assert r.state.in_channels == 6


def test_subsample_rules():
    data = list(range(10))
    assert subsample_labels(data, 1.0, 0) == data
    half = subsample_labels(data, 0.5, 0)
    assert len(half) == 5 and half == sorted(half)
    big = list(range(100))
    assert subsample_labels(big, 0.3, 1) == subsample_labels(big, 0.3, 1)
    assert subsample_labels(big, 0.3, 1) != subsample_labels(big, 0.3, 2)
    with pytest.raises(ValueError):
        subsample_labels(data, 0.05, 0)
    with pytest.raises(ValueError):
        subsample_labels(data, 0.0, 0)


@pytest.mark.parametrize("kw", [dict(n=0), dict(size=30), dict(sigma=5.0), dict(fraction=0),
                                dict(freeze_depth=7), dict(select="last"), dict(eps=0.0),
                                dict(epochs=10)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


@pytest.mark.parametrize("kw,expected", [({"deterministic": True, "threads": 4}, 1),
                                         ({"threads": 2}, 2)])
def test_thread_limit(kw, expected):
    from threadpoolctl import threadpool_info
    with thread_limit(TrainConfig(**kw)):
        assert all(p["num_threads"] == expected for p in threadpool_info())
