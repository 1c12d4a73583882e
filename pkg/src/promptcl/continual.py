"""Class-incremental protocol: per-task training with parameter isolation,
the prompt pool with k-means task keys, task-identity prediction, and the
recall / forgetting metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .autodiff import Tensor, backward, constant
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config, print_config
from .data import Dataset, TaskData
from .encoder import (Backbone, DenseFusion, DensePrompts, PromptSet,
                      new_prompt_set)
from .factors import CoupledPromptFactors, FusionFactors
from .losses import (cpa_loss, hpa_loss, retrieval_loss, task_label_matrix,
                     total_loss)
from .optim import Adam, CosineSchedule


# ---------------------------------------------------------------------------
# task keys and identity prediction
# ---------------------------------------------------------------------------

def kmeans(x: np.ndarray, k: int, gen: np.random.Generator, iters: int = 20) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding, fixed iteration count."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[gen.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = centers[0]
            continue
        probs = d2 / total
        centers[i] = x[gen.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    for _ in range(iters):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers


@dataclass
class TaskKey:
    """L2-normalized centroids of prompt-free vision features."""

    centroids: np.ndarray  # (C, d_joint)


@dataclass
class PoolEntry:
    prompt_set: PromptSet
    key: TaskKey
    name: str


@dataclass
class PromptPool:
    entries: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.entries)

    def prompt_sets(self) -> list:
        return [e.prompt_set for e in self.entries]


def encode_batched(backbone: Backbone, modality: str, x: np.ndarray,
                   prompt_set: Optional[PromptSet] = None,
                   batch: int = 128) -> np.ndarray:
    """Pooled features as a plain array, in evaluation-sized batches."""
    outs = []
    for i in range(0, len(x), batch):
        outs.append(backbone.encode(modality, x[i:i + batch], prompt_set).data)
    return np.concatenate(outs, axis=0)


def build_task_key(backbone: Backbone, vision: np.ndarray, n_centroids: int,
                   gen: np.random.Generator) -> TaskKey:
    """k-means over prompt-free pooled vision features of the train split."""
    feats = encode_batched(backbone, "vision", vision)
    if len(feats) < n_centroids:
        warnings.warn(f"build_task_key: only {len(feats)} samples, reducing "
                      f"centroids from {n_centroids}")
        n_centroids = len(feats)
    centers = kmeans(feats, n_centroids, gen)
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return TaskKey(centroids=centers / norms)


def predict_task(feature: np.ndarray, pool: PromptPool) -> int:
    """Task whose nearest centroid (cosine) is highest; ties -> lowest id."""
    if pool.count == 0:
        raise ValueError("predict_task: empty prompt pool")
    f = feature / max(np.linalg.norm(feature), 1e-12)
    best, best_score = 0, -np.inf
    for tid, entry in enumerate(pool.entries):
        score = float((entry.key.centroids @ f).max())
        if score > best_score:
            best, best_score = tid, score
    return best


def predict_tasks(features: np.ndarray, pool: PromptPool) -> np.ndarray:
    return np.array([predict_task(f, pool) for f in features], dtype=int)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def task_name_embeddings(backbone: Backbone, task_tokens: list) -> list:
    """Task semantics from the frozen text encoder's word-embedding rows."""
    table = backbone.language.table.data
    return [table[t] for t in task_tokens]


def train_task(backbone: Backbone, pool: PromptPool, task: TaskData,
               cfg: RunConfig, task_tokens: list) -> list:
    """Train one task's PromptSet, freeze it, append it to the pool.

    Returns per-epoch mean losses. Previous entries are never touched; on
    a non-finite loss the pool is left unchanged.
    """
    if not backbone.frozen:
        raise ValueError("train_task: backbone must be frozen")
    for e in pool.entries:
        if not e.prompt_set.frozen:
            raise ValueError(f"train_task: task {e.prompt_set.task_id} not frozen")
    v = cfg.variant
    gen = rng.stream(cfg.seed, f"prompt.init.task{task.task_id}")
    ps = new_prompt_set(task.task_id, cfg.backbone, cfg.prompt_rank,
                        cfg.interaction_rank, v.prompt_type, v.cpf, gen,
                        lambda_v=cfg.lambda_v, lambda_l=cfg.lambda_l)

    labels = None
    if v.cpa:
        embs = task_name_embeddings(backbone, task_tokens[:pool.count + 1])
        labels = task_label_matrix(embs, cfg.threshold)
    all_sets = pool.prompt_sets() + [ps]

    vision, captions = task.train.vision, task.train.captions
    n = len(vision)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    sched = CosineSchedule(base_lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch,
                           min_lr=cfg.min_lr)
    opt = Adam(ps.params())
    shuffle = rng.stream(cfg.seed, f"train.shuffle.task{task.task_id}")

    step = 0
    epoch_losses = []
    for epoch in range(cfg.epochs):
        perm = shuffle.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            if len(idx) < 2:
                continue
            fv = backbone.encode("vision", vision[idx], ps)
            fl = backbone.encode("language", captions[idx], ps)
            l_base = retrieval_loss(fv, fl, cfg.temps.retrieval)
            l_modal = hpa_loss(ps.vision_prompts(), ps.text_prompts(),
                               cfg.temps.modal) if v.hpa else constant(0.0)
            l_task = cpa_loss(all_sets, labels, cfg.temps.task) if v.cpa else constant(0.0)
            loss = total_loss(l_base, l_modal, l_task, cfg.weights)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"train_task: non-finite loss (task {task.task_id}, epoch {epoch})")
            opt.zero_grad()
            backward(loss)
            opt.step(sched.lr(step))
            step += 1
            losses.append(float(loss.data))
        epoch_losses.append(float(np.mean(losses)))

    ps.freeze()
    key = build_task_key(backbone, vision, cfg.centroids,
                         rng.stream(cfg.seed, f"key.task{task.task_id}"))
    pool.entries.append(PoolEntry(prompt_set=ps, key=key, name=task.name))
    return epoch_losses


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    stage: int
    task: int
    direction: str       # "i2t" or "t2i"
    identity_mode: str   # "oracle", "predicted", or "baseline"
    r1: float
    r5: float
    r10: float

    def recall(self, k: int) -> float:
        return {1: self.r1, 5: self.r5, 10: self.r10}[k]


def recall_at_k(ranked: np.ndarray, targets: np.ndarray, k: int) -> float:
    """Percentage of queries whose target is within the top k of `ranked`
    (queries x gallery indices, best first). k clamps to gallery size."""
    if k < 1:
        raise ValueError(f"recall_at_k: k must be >= 1, got {k}")
    k = min(k, ranked.shape[1])
    hits = (ranked[:, :k] == np.asarray(targets)[:, None]).any(axis=1)
    return 100.0 * float(hits.mean())


def _rank(scores: np.ndarray) -> np.ndarray:
    """Descending-score gallery order, ties broken by lower index."""
    return np.argsort(-scores, axis=-1, kind="stable")


def _score_rows(backbone: Backbone, pool: PromptPool, cfg: RunConfig,
                q_vision: np.ndarray, q_captions: np.ndarray,
                g_vision: np.ndarray, g_captions: np.ndarray,
                assigned: np.ndarray, gallery_ps: list) -> tuple:
    """Score matrices (i2t, t2i), each (n_queries, n_gallery).

    i2t row a: query image a vs every gallery caption; t2i row a: query
    caption a vs every gallery image. `assigned[a]` is the pool index whose
    prompts encode query a (both directions key on the paired image);
    `gallery_ps[b]` is the pool index owning gallery item b.
    """
    nq, ng = len(q_vision), len(g_captions)
    i2t = np.empty((nq, ng))
    t2i = np.empty((nq, ng))
    # encode each side once per prompt set in use
    g_cap_feats = np.empty((ng, cfg.backbone.d_joint))
    g_vis_feats = np.empty((ng, cfg.backbone.d_joint))
    for p in sorted(set(gallery_ps)):
        sel = np.array([i for i, gp in enumerate(gallery_ps) if gp == p])
        ps = pool.entries[p].prompt_set
        g_cap_feats[sel] = encode_batched(backbone, "language", g_captions[sel], ps)
        g_vis_feats[sel] = encode_batched(backbone, "vision", g_vision[sel], ps)
    for p in sorted(set(assigned)):
        sel = np.where(assigned == p)[0]
        ps = pool.entries[p].prompt_set
        qv = encode_batched(backbone, "vision", q_vision[sel], ps)
        qc = encode_batched(backbone, "language", q_captions[sel], ps)
        i2t[sel] = qv @ g_cap_feats.T
        t2i[sel] = qc @ g_vis_feats.T
    return i2t, t2i


def evaluate_stage(backbone: Backbone, pool: PromptPool, tasks: list,
                   cfg: RunConfig, identity_mode: Optional[str] = None,
                   gallery_scope: Optional[str] = None) -> list:
    """Metrics for every task seen so far, at the current stage."""
    identity_mode = identity_mode or cfg.identity_mode
    gallery_scope = gallery_scope or cfg.gallery_scope
    stage = pool.count
    if stage == 0:
        raise ValueError("evaluate_stage: empty prompt pool")
    if any(len(t.test.vision) == 0 for t in tasks[:stage]):
        raise ValueError("evaluate_stage: empty test set")

    records = []
    if gallery_scope == "union":
        g_vision = np.concatenate([t.test.vision for t in tasks[:stage]])
        g_captions = np.concatenate([t.test.captions for t in tasks[:stage]])
        gallery_ps = [j for j, t in enumerate(tasks[:stage])
                      for _ in range(len(t.test.vision))]
        offsets = np.cumsum([0] + [len(t.test.vision) for t in tasks[:stage]])
    for j, task in enumerate(tasks[:stage]):
        q_vision = task.test.vision
        q_captions = task.test.captions
        nq = len(q_vision)
        if identity_mode == "oracle":
            assigned = np.full(nq, j)
        else:
            plain = encode_batched(backbone, "vision", q_vision, None)
            assigned = predict_tasks(plain, pool)
        if gallery_scope == "per-task":
            gv, gc = q_vision, q_captions
            gps = [j] * nq
            targets = np.arange(nq)
        else:
            gv, gc = g_vision, g_captions
            gps = gallery_ps
            targets = np.arange(nq) + offsets[j]
        i2t, t2i = _score_rows(backbone, pool, cfg, q_vision, q_captions,
                               gv, gc, assigned, gps)
        for direction, scores in (("i2t", i2t), ("t2i", t2i)):
            ranked = _rank(scores)
            records.append(MetricsRecord(
                stage=stage, task=j, direction=direction,
                identity_mode=identity_mode,
                r1=recall_at_k(ranked, targets, 1),
                r5=recall_at_k(ranked, targets, 5),
                r10=recall_at_k(ranked, targets, 10),
            ))
    return records


def baseline_records(backbone: Backbone, tasks: list, stage: int) -> list:
    """Prompt-free frozen-backbone retrieval, same per-task galleries."""
    records = []
    for j, task in enumerate(tasks[:stage]):
        fv = encode_batched(backbone, "vision", task.test.vision)
        fl = encode_batched(backbone, "language", task.test.captions)
        scores = fv @ fl.T
        targets = np.arange(len(fv))
        for direction, s in (("i2t", scores), ("t2i", scores.T)):
            ranked = _rank(s)
            records.append(MetricsRecord(
                stage=stage, task=j, direction=direction, identity_mode="baseline",
                r1=recall_at_k(ranked, targets, 1),
                r5=recall_at_k(ranked, targets, 5),
                r10=recall_at_k(ranked, targets, 10),
            ))
    return records


def forgetting(history: list) -> tuple:
    """F@K per K plus their average, from a task's per-stage records of one
    direction. F@K = max earlier-stage R@K minus final-stage R@K."""
    history = sorted(history, key=lambda r: r.stage)
    fk = {}
    for k in (1, 5, 10):
        vals = [r.recall(k) for r in history]
        fk[k] = (max(vals[:-1]) - vals[-1]) if len(vals) > 1 else 0.0
    avg = (fk[1] + fk[5] + fk[10]) / 3.0
    return fk, avg


# ---------------------------------------------------------------------------
# pool persistence
# ---------------------------------------------------------------------------

_DP_PROMPT_FIELDS = ("shared_depth", "vis_token", "vis_dim", "txt_token", "txt_dim")
_DP_FUSION_FIELDS = ("vis_depth", "vis_in", "vis_out", "txt_depth", "txt_in", "txt_out")


def pool_arrays(pool: PromptPool) -> tuple:
    """Flatten a pool into (named arrays, per-task manifest list)."""
    arrays: dict = {}
    tasks = []
    for t, entry in enumerate(pool.entries):
        ps = entry.prompt_set
        prefix = f"task{t}"
        if ps.prompt_type == "dp":
            for name in _DP_PROMPT_FIELDS:
                arrays[f"{prefix}/{name}"] = getattr(ps.prompts, name).data
            if ps.fusion is not None:
                for name in _DP_FUSION_FIELDS:
                    arrays[f"{prefix}/fusion_{name}"] = getattr(ps.fusion, name).data
        else:
            arrays[f"{prefix}/pv"] = ps.prompts.pv.data
            arrays[f"{prefix}/pl"] = ps.prompts.pl.data
            if ps.fusion is not None:
                arrays[f"{prefix}/fusion_vis"] = ps.fusion.vis.data
                arrays[f"{prefix}/fusion_txt"] = ps.fusion.txt.data
        arrays[f"{prefix}/centroids"] = entry.key.centroids
        tasks.append({
            "task_id": ps.task_id,
            "name": entry.name,
            "prompt_type": ps.prompt_type,
            "with_fusion": ps.fusion is not None,
            "lambda_v": ps.lambda_v,
            "lambda_l": ps.lambda_l,
        })
    return arrays, tasks


def pool_from_arrays(arrays: dict, tasks: list) -> PromptPool:
    def frozen(name):
        return Tensor(arrays[name].copy())

    pool = PromptPool()
    for t, info in enumerate(tasks):
        prefix = f"task{t}"
        if info["prompt_type"] == "dp":
            prompts = CoupledPromptFactors(
                **{name: frozen(f"{prefix}/{name}") for name in _DP_PROMPT_FIELDS})
            fusion = FusionFactors(
                **{name: frozen(f"{prefix}/fusion_{name}") for name in _DP_FUSION_FIELDS}) \
                if info["with_fusion"] else None
        else:
            prompts = DensePrompts(pv=frozen(f"{prefix}/pv"), pl=frozen(f"{prefix}/pl"))
            fusion = DenseFusion(vis=frozen(f"{prefix}/fusion_vis"),
                                 txt=frozen(f"{prefix}/fusion_txt")) \
                if info["with_fusion"] else None
        ps = PromptSet(task_id=info["task_id"], prompt_type=info["prompt_type"],
                       prompts=prompts, fusion=fusion, frozen=True,
                       lambda_v=info["lambda_v"], lambda_l=info["lambda_l"])
        pool.entries.append(PoolEntry(
            prompt_set=ps, key=TaskKey(centroids=arrays[f"{prefix}/centroids"]),
            name=info["name"]))
    return pool


def save_run(path, backbone: Backbone, pool: PromptPool, cfg: RunConfig,
             stage: int) -> None:
    arrays = {name: t.data for name, t in backbone.named_params()}
    parrays, tasks = pool_arrays(pool)
    arrays.update(parrays)
    manifest = {
        "kind": "run",
        "stage": stage,
        "seed": cfg.seed,
        "config": print_config(cfg),
        "tasks": tasks,
    }
    save_checkpoint(path, arrays, manifest)


def load_run(path) -> tuple:
    """Returns (backbone, pool, cfg, stage)."""
    arrays, manifest = load_checkpoint(path)
    if manifest.get("kind") not in ("run", "backbone"):
        raise ValueError(f"{path}: checkpoint kind {manifest.get('kind')!r} not loadable here")
    cfg = parse_config(manifest["config"])
    backbone = Backbone(cfg.backbone, seed=cfg.seed)
    for name, t in backbone.named_params():
        t.data = arrays[name].copy()
    backbone.freeze()
    if manifest["kind"] == "backbone":
        return backbone, PromptPool(), cfg, 0
    pool = pool_from_arrays(arrays, manifest["tasks"])
    return backbone, pool, cfg, manifest["stage"]


def save_backbone(path, backbone: Backbone, cfg: RunConfig) -> None:
    arrays = {name: t.data for name, t in backbone.named_params()}
    save_checkpoint(path, arrays, {
        "kind": "backbone", "seed": cfg.seed, "config": print_config(cfg)})
