"""Incremental protocol mechanics: task keys, prediction, metrics, isolation,
and pool persistence."""

import dataclasses

import numpy as np
import pytest

from promptcl import rng
from promptcl.config import RunConfig, VariantFlags
from promptcl.continual import (
    MetricsRecord, PromptPool, baseline_records, build_task_key,
    encode_batched, evaluate_stage, forgetting, kmeans, load_run,
    pool_arrays, pool_from_arrays, predict_task, predict_tasks, recall_at_k,
    save_run, train_task,
)
from promptcl.data import GeneratorSpec, build_dataset
from promptcl.encoder import Backbone, pretrain_backbone
from tests.test_encoder import tiny_cfg


def tiny_run_cfg(variant="lpi-p", **over):
    cfg = RunConfig(backbone=tiny_cfg(), variant=VariantFlags.preset(variant),
                    prompt_rank=2, interaction_rank=2, epochs=2, batch_size=8,
                    pretrain_steps=0, centroids=3, seed=0)
    return dataclasses.replace(cfg, **over) if over else cfg


@pytest.fixture(scope="module")
def tiny_world():
    """A frozen tiny backbone plus a 2-task dataset sized to it."""
    spec = GeneratorSpec(task_names=("animal", "food"), classes_per_task=2,
                         train_per_class=6, test_per_class=4,
                         pretrain_classes=2, pretrain_per_class=4,
                         n_patches=4, patch_dim=4, cap_len=4, block_size=8,
                         seed=0)
    ds = build_dataset(spec)
    cfg = tiny_run_cfg()
    assert ds.vocab <= cfg.backbone.vocab
    backbone = Backbone(cfg.backbone, seed=0, token_features=ds.appearance)
    backbone.freeze()
    tokens = [t.task_token for t in ds.tasks]
    return backbone, ds, cfg, tokens


# --- k-means and task keys ----------------------------------------------

def test_kmeans_two_separated_blobs():
    gen = rng.stream(0, "test.km")
    a = gen.normal(0, 0.01, (30, 3)) + np.array([5.0, 0.0, 0.0])
    b = gen.normal(0, 0.01, (30, 3)) - np.array([5.0, 0.0, 0.0])
    x = np.concatenate([a, b])
    centers = kmeans(x, 2, rng.stream(1, "test.km_seed"))
    want = sorted([a.mean(axis=0), b.mean(axis=0)], key=lambda c: c[0])
    got = sorted(centers, key=lambda c: c[0])
    for w, g in zip(want, got):
        assert np.max(np.abs(w - g)) <= 1e-6


def test_kmeans_single_center_is_mean():
    gen = rng.stream(2, "test.km1")
    x = gen.normal(0, 1, (40, 4))
    centers = kmeans(x, 1, rng.stream(3, "test.km1_seed"))
    assert np.allclose(centers[0], x.mean(axis=0), atol=1e-12)


def test_kmeans_degenerate_identical_points():
    x = np.ones((10, 3))
    centers = kmeans(x, 3, rng.stream(4, "test.km_deg"))
    assert np.allclose(centers, 1.0, atol=1e-12)


def test_task_key_centroids_unit_norm_and_reduction(tiny_world):
    backbone, ds, cfg, _ = tiny_world
    vis = ds.tasks[0].train.vision
    key = build_task_key(backbone, vis, 3, rng.stream(5, "test.key"))
    assert key.centroids.shape == (3, cfg.backbone.d_joint)
    assert np.allclose(np.linalg.norm(key.centroids, axis=1), 1.0, atol=1e-9)
    with pytest.warns(UserWarning, match="reducing"):
        small = build_task_key(backbone, vis[:2], 5, rng.stream(6, "test.key2"))
    assert small.centroids.shape[0] == 2


# --- task identity prediction -------------------------------------------

def _pool_with_keys(centroid_rows):
    from promptcl.continual import PoolEntry, TaskKey
    pool = PromptPool()
    for i, rows in enumerate(centroid_rows):
        pool.entries.append(PoolEntry(prompt_set=None, name=f"t{i}",
                                      key=TaskKey(centroids=np.asarray(rows, float))))
    return pool


def test_predict_task_empty_pool_rejected():
    with pytest.raises(ValueError, match="empty"):
        predict_task(np.ones(3), PromptPool())


def test_predict_task_singleton_and_exact_match():
    pool = _pool_with_keys([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert predict_task(np.array([0.9, 0.1]), pool) == 0
    assert predict_task(np.array([0.0, 5.0]), pool) == 1
    single = _pool_with_keys([[[0.0, 1.0]]])
    assert predict_task(np.array([1.0, 0.0]), single) == 0
    got = predict_tasks(np.array([[1.0, 0.0], [0.0, 1.0]]), pool)
    assert got.tolist() == [0, 1]


# --- metrics -------------------------------------------------------------

def test_recall_at_k_hand_example():
    ranked = np.array([[2, 0, 1], [1, 0, 2]])
    targets = np.array([2, 0])
    assert recall_at_k(ranked, targets, 1) == 50.0
    assert recall_at_k(ranked, targets, 2) == 100.0
    # k clamps to the gallery size
    assert recall_at_k(ranked, targets, 10) == 100.0
    with pytest.raises(ValueError, match=">= 1"):
        recall_at_k(ranked, targets, 0)


def _rec(stage, r1, r5=None, r10=None):
    r5 = r1 if r5 is None else r5
    r10 = r5 if r10 is None else r10
    return MetricsRecord(stage=stage, task=0, direction="i2t",
                         identity_mode="oracle", r1=r1, r5=r5, r10=r10)


def test_forgetting_hand_sequence():
    fk, avg = forgetting([_rec(1, 3.0), _rec(2, 2.0), _rec(3, 1.0)])
    assert fk[1] == 2.0 and avg == 2.0


def test_forgetting_can_be_negative_and_single_stage_zero():
    fk, avg = forgetting([_rec(1, 10.0), _rec(2, 30.0)])
    assert fk[1] == -20.0 and avg == -20.0
    fk, avg = forgetting([_rec(1, 50.0)])
    assert fk == {1: 0.0, 5: 0.0, 10: 0.0} and avg == 0.0


# --- training protocol ----------------------------------------------------

def test_train_task_requires_frozen_backbone(tiny_world):
    _, ds, cfg, tokens = tiny_world
    live = Backbone(cfg.backbone, seed=1)
    with pytest.raises(ValueError, match="frozen"):
        train_task(live, PromptPool(), ds.tasks[0], cfg, tokens)


def test_sequential_training_isolates_earlier_tasks(tiny_world):
    backbone, ds, cfg, tokens = tiny_world
    pool = PromptPool()
    losses0 = train_task(backbone, pool, ds.tasks[0], cfg, tokens)
    assert len(losses0) == cfg.epochs and all(np.isfinite(v) for v in losses0)
    first = pool.entries[0]
    assert first.prompt_set.frozen
    before = [p.data.copy() for p in first.prompt_set.params()]
    before_key = first.key.centroids.copy()

    train_task(backbone, pool, ds.tasks[1], cfg, tokens)
    assert pool.count == 2
    after = [p.data for p in first.prompt_set.params()]
    assert all(np.array_equal(b, a) for b, a in zip(before, after))
    assert np.array_equal(before_key, first.key.centroids)


def test_non_finite_data_aborts_without_pool_change(tiny_world):
    backbone, ds, cfg, tokens = tiny_world
    bad = dataclasses.replace(
        ds.tasks[0],
        train=dataclasses.replace(ds.tasks[0].train,
                                  vision=np.full_like(ds.tasks[0].train.vision, np.nan)))
    pool = PromptPool()
    with pytest.raises((FloatingPointError, ValueError), match="non-finite"):
        train_task(backbone, pool, bad, cfg, tokens)
    assert pool.count == 0


# --- evaluation ------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_pool(tiny_world):
    backbone, ds, cfg, tokens = tiny_world
    pool = PromptPool()
    for task in ds.tasks:
        train_task(backbone, pool, task, cfg, tokens)
    return pool


def test_evaluate_stage_empty_pool_rejected(tiny_world):
    backbone, ds, cfg, _ = tiny_world
    with pytest.raises(ValueError, match="empty prompt pool"):
        evaluate_stage(backbone, PromptPool(), ds.tasks, cfg)


def test_evaluate_stage_empty_test_set_rejected(tiny_world, trained_pool):
    backbone, ds, cfg, _ = tiny_world
    empty = dataclasses.replace(
        ds.tasks[0],
        test=dataclasses.replace(ds.tasks[0].test,
                                 vision=ds.tasks[0].test.vision[:0],
                                 captions=ds.tasks[0].test.captions[:0]))
    with pytest.raises(ValueError, match="empty test set"):
        evaluate_stage(backbone, trained_pool, [empty, ds.tasks[1]], cfg)


def test_evaluate_stage_record_structure(tiny_world, trained_pool):
    backbone, ds, cfg, _ = tiny_world
    records = evaluate_stage(backbone, trained_pool, ds.tasks, cfg,
                             identity_mode="oracle")
    # two tasks x two directions
    assert len(records) == 4
    for r in records:
        assert r.stage == 2 and r.identity_mode == "oracle"
        assert 0.0 <= r.r1 <= r.r5 <= r.r10 <= 100.0


def test_evaluate_stage_union_gallery(tiny_world, trained_pool):
    backbone, ds, cfg, _ = tiny_world
    records = evaluate_stage(backbone, trained_pool, ds.tasks, cfg,
                             identity_mode="oracle", gallery_scope="union")
    per_task = evaluate_stage(backbone, trained_pool, ds.tasks, cfg,
                              identity_mode="oracle")
    # a strictly larger gallery can only make retrieval no easier
    for u, p in zip(records, per_task):
        assert u.r5 <= p.r5 + 1e-9


def test_baseline_records_cover_all_tasks(tiny_world):
    backbone, ds, _, _ = tiny_world
    records = baseline_records(backbone, ds.tasks, 2)
    assert len(records) == 4
    assert all(r.identity_mode == "baseline" for r in records)


def test_encode_batched_matches_single_batch(tiny_world):
    backbone, ds, _, _ = tiny_world
    vis = ds.tasks[0].test.vision
    whole = encode_batched(backbone, "vision", vis, batch=256)
    chunked = encode_batched(backbone, "vision", vis, batch=3)
    assert np.array_equal(whole, chunked)


# --- persistence ------------------------------------------------------------

def test_pool_array_round_trip(tiny_world, trained_pool):
    _, ds, cfg, _ = tiny_world
    arrays, tasks = pool_arrays(trained_pool)
    clone = pool_from_arrays(arrays, tasks)
    assert clone.count == trained_pool.count
    for orig, copy in zip(trained_pool.entries, clone.entries):
        assert copy.name == orig.name
        assert copy.prompt_set.frozen
        assert copy.prompt_set.lambda_v == orig.prompt_set.lambda_v
        for p, q in zip(orig.prompt_set.params(), copy.prompt_set.params()):
            assert np.array_equal(p.data, q.data)
        assert np.array_equal(orig.key.centroids, copy.key.centroids)


def test_save_and_load_run(tiny_world, trained_pool, tmp_path):
    backbone, ds, cfg, _ = tiny_world
    path = tmp_path / "run.ckpt"
    save_run(path, backbone, trained_pool, cfg, stage=2)
    bb2, pool2, cfg2, stage = load_run(path)
    assert stage == 2 and pool2.count == 2
    assert bb2.frozen
    for (na, a), (nb, b) in zip(backbone.named_params(), bb2.named_params()):
        assert na == nb and np.array_equal(a.data, b.data)
    vis = ds.tasks[0].test.vision
    f1 = encode_batched(backbone, "vision", vis, trained_pool.entries[0].prompt_set)
    f2 = encode_batched(bb2, "vision", vis, pool2.entries[0].prompt_set)
    assert np.array_equal(f1, f2)
