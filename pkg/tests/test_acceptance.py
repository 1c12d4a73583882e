"""Acceptance gate: ten numbered criteria, each printing one PASS/FAIL line.

Criteria 1-4 and 10 are oracle/formula checks; 5-8 run the full desk-scale
benchmark (three seeds, three variants — the slow part, shared through a
session fixture); 9 exercises determinism and resume at a reduced scale,
since byte-level reproducibility does not depend on model size.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from promptcl import rng
from promptcl.autodiff import constant, grad_check, parameter, softmax, tsum
from promptcl.cli import main as cli_main
from promptcl.config import RunConfig, apply_variant
from promptcl.continual import (
    PromptPool, baseline_records, encode_batched, evaluate_stage, forgetting,
    predict_tasks, train_task,
)
from promptcl.data import GeneratorSpec, build_dataset
from promptcl.encoder import (
    Backbone, DensePrompts, PromptSet, fuse_layer, new_prompt_set,
    pretrain_backbone,
)
from promptcl.factors import (
    brute_force_reconstruct, init_factors, param_count, reconstruct,
    reconstruct_linear,
)
from promptcl.losses import (
    LossWeights, cpa_loss, hpa_loss, nt_bxent_pair, retrieval_loss,
    task_label_matrix, total_loss,
)
from tests.test_encoder import tiny_cfg

REGRESSION_FILE = Path(__file__).parent / "data" / "regression.json"


def _report(n: int, ok: bool, detail: str):
    line = f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness, 20 instances per objective, <= 2 min
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    t0 = time.time()
    tol = 1e-5
    worst = {}
    cfg = tiny_cfg()

    def check(name, build, n=20):
        errs = []
        for i in range(n):
            f, params = build(rng.stream(i, f"accept.grad.{name}"))
            errs.append(grad_check(f, params))
        worst[name] = max(errs)

    def b_retrieval(gen):
        fv = parameter(gen.normal(0, 1, (3, 4)))
        fl = parameter(gen.normal(0, 1, (3, 4)))
        return lambda: retrieval_loss(fv, fl, 0.5), [fv, fl]

    def b_hpa(gen):
        pv = parameter(gen.normal(0, 1, (2, 3, 4)))
        pl = parameter(gen.normal(0, 1, (2, 3, 5)))
        return lambda: hpa_loss(pv, pl, 0.7), [pv, pl]

    def b_cpa(gen):
        sets = [new_prompt_set(i, cfg, 2, 2, "dp", with_fusion=False, gen=gen)
                for i in range(2)]
        labels = task_label_matrix([gen.normal(0, 1, 3) for _ in range(2)], 0.4)
        params = [p for s in sets for p in s.params()]
        return lambda: cpa_loss(sets, labels, 0.5), params

    def b_total(gen):
        a = parameter(gen.normal(0, 1, ()))
        b = parameter(gen.normal(0, 1, ()))
        c = parameter(gen.normal(0, 1, ()))
        w = LossWeights()
        return lambda: total_loss(a * a, b * b, c * c, w), [a, b, c]

    def b_reconstruct(gen):
        f = init_factors((3, 3, 4), 2, gen)
        return lambda: tsum(reconstruct(f) * reconstruct(f)), f.params()

    def b_fuse(gen):
        # dense fusion maps give well-conditioned gradients for the blend
        # itself; the factored-map path is covered by the reconstruct check
        ps = new_prompt_set(0, cfg, 2, 2, "cp", with_fusion=True, gen=gen)
        i_v = constant(gen.normal(0, 1, (cfg.prompt_len, cfg.d_v)))
        i_l = constant(gen.normal(0, 1, (cfg.prompt_len, cfg.d_l)))

        def f():
            f_v, f_l = fuse_layer(i_v, i_l, ps, 1, 0.5, 0.5)
            return tsum(f_v * f_v) + tsum(f_l * f_l)
        return f, ps.fusion.params()

    vis = rng.stream(99, "accept.grad.data").normal(0, 1, (2, cfg.n_patches, cfg.patch_dim))
    cap = rng.stream(99, "accept.grad.cap").integers(0, cfg.vocab, (2, cfg.cap_len))

    def b_encode(gen):
        bb = Backbone(cfg, seed=int(gen.integers(1 << 16)))
        bb.freeze()
        # factored prompts only: the 0.1-weight fusion blend leaves some
        # fusion-map gradient components near 1e-6, where h=1e-5 central
        # differences are dominated by rounding noise; fusion gradients are
        # checked above through a well-conditioned quadratic
        ps = new_prompt_set(0, cfg, 2, 2, "dp", with_fusion=False, gen=gen)

        def f():
            fv = bb.encode("vision", vis, ps)
            fl = bb.encode("language", cap, ps)
            return retrieval_loss(fv, fl, 0.5)
        return f, ps.params()

    check("retrieval", b_retrieval)
    check("hpa", b_hpa)
    check("cpa", b_cpa)
    check("total", b_total)
    check("reconstruct", b_reconstruct)
    check("fuse", b_fuse)
    check("encode-through-loss", b_encode, n=20)

    elapsed = time.time() - t0
    ok = max(worst.values()) <= tol and elapsed <= 120
    _report(1, ok, f"max rel err {max(worst.values()):.2e} (tol {tol}), "
                   f"{elapsed:.0f}s (budget 120s); per-objective "
            + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


# ---------------------------------------------------------------------------
# criterion 2: reconstruction oracles
# ---------------------------------------------------------------------------

def test_criterion_2_reconstruction_oracle():
    worst = 0.0
    for i in range(50):
        gen = rng.stream(i, "accept.recon")
        shape = tuple(gen.integers(1, 5, 3))
        f = init_factors(shape, int(gen.integers(1, 5)), gen)
        worst = max(worst, float(np.max(np.abs(
            reconstruct(f).data - brute_force_reconstruct(f)))))

    worst_lin = 0.0
    for i in range(20):
        gen = rng.stream(i, "accept.recon_lin")
        depth, d_in, d_out, r = 3, 4, 5, 2
        f = init_factors((depth, d_in + 1, d_out), r, gen)
        layer = int(gen.integers(0, depth))
        w, b = reconstruct_linear(f, layer)
        # triple-loop oracle over the layer's (d_in + 1, d_out) slice
        a, bf, c = f.d1.data, f.d2.data, f.d3.data
        want = np.zeros((d_in + 1, d_out))
        for j in range(d_in + 1):
            for k in range(d_out):
                for t in range(r):
                    want[j, k] += a[layer, t] * bf[j, t] * c[k, t] / r
        worst_lin = max(worst_lin, float(np.max(np.abs(w.data - want[:-1]))),
                        float(np.max(np.abs(b.data - want[-1]))))
    ok = worst <= 1e-12 and worst_lin <= 1e-12
    _report(2, ok, f"reconstruct vs brute force {worst:.1e}, "
                   f"linear vs triple loop {worst_lin:.1e} (tol 1e-12)")


# ---------------------------------------------------------------------------
# criterion 3: analytic loss values
# ---------------------------------------------------------------------------

def test_criterion_3_analytic_values():
    import math
    checks = []
    pv = constant(rng.stream(0, "accept.analytic").normal(0, 1, (1, 4, 6)))
    pl = constant(rng.stream(1, "accept.analytic").normal(0, 1, (1, 4, 5)))
    checks.append(("hpa D=1", abs(hpa_loss(pv, pl, 0.01).data) <= 1e-12))

    x = constant(rng.stream(2, "accept.analytic").normal(0, 1, (5, 7)))
    rows = softmax(x).data.sum(axis=-1)
    checks.append(("softmax rows", np.max(np.abs(rows - 1.0)) <= 1e-12))

    checks.append(("nt-bxent neg TS=1",
                   abs(nt_bxent_pair(1.0, 0, 1.0) - math.log(2.0)) <= 1e-9))

    got = retrieval_loss(constant(np.eye(2)), constant(np.eye(2)), 1.0).data
    checks.append(("retrieval 2x2", abs(got - math.log(1 + math.exp(-1))) <= 1e-9))

    pv = np.zeros((2, 2, 3)); pv[0, 0, :] = 2.0; pv[1, 1, :] = 2.0
    pl = np.zeros((2, 2, 3)); pl[0, 0, :] = 1.0; pl[1, 1, :] = 1.0
    got = hpa_loss(constant(pv), constant(pl), 1.0).data
    checks.append(("hpa 2x2", abs(got - math.log(1 + math.exp(-2))) <= 1e-9))

    ok = all(c for _, c in checks)
    _report(3, ok, "; ".join(f"{name} {'ok' if c else 'MISMATCH'}"
                             for name, c in checks))


# ---------------------------------------------------------------------------
# criterion 4: parameter-count reproduction at paper-scale dims
# ---------------------------------------------------------------------------

def test_criterion_4_param_counts():
    dp = param_count(9, 16, 768, 512, 4, "dp")
    cp = param_count(9, 16, 768, 512, 4, "cp")
    ok = dp == 5284 and cp == 184320 and cp / dp >= 30
    _report(4, ok, f"DP {dp} (want 5284), CP {cp} (want 184320), "
                   f"ratio {cp / dp:.1f}x (want >= 30)")


# ---------------------------------------------------------------------------
# the shared desk-scale study (criteria 5-8)
# ---------------------------------------------------------------------------

VARIANTS = ("dp", "lpi-m", "lpi-p")


def _run_seed(seed: int, full: bool) -> dict:
    """Pretrain and run all variants for one seed; `full` adds the per-stage
    history, baseline, and identity probes used only for seed 0."""
    out = {"seed": seed}
    ds = build_dataset(GeneratorSpec(seed=seed))
    cfg0 = RunConfig(seed=seed)
    t0 = time.time()
    bb = Backbone(cfg0.backbone, seed=seed, token_features=ds.appearance)
    pretrain_backbone(bb, ds.pretrain.vision, ds.pretrain.captions,
                      steps=cfg0.pretrain_steps, batch_size=cfg0.batch_size,
                      base_lr=cfg0.pretrain_lr, seed=seed)
    tokens = [t.task_token for t in ds.tasks]

    def avg(recs, attr):
        return float(np.mean([getattr(r, attr) for r in recs]))

    if full:
        out["baseline_r1"] = avg(baseline_records(bb, ds.tasks, len(ds.tasks)), "r1")

    out["pred_r5"] = {}
    for variant in VARIANTS:
        cfg = apply_variant(RunConfig(seed=seed), variant)
        pool = PromptPool()
        history = []
        frozen_bytes = {}
        clean = True
        for task in ds.tasks:
            train_task(bb, pool, task, cfg, tokens)
            tid = pool.entries[-1].prompt_set.task_id
            frozen_bytes[tid] = [p.data.tobytes()
                                 for p in pool.entries[-1].prompt_set.params()]
            # earlier tasks' parameter bytes must never move
            for e in pool.entries:
                now = [p.data.tobytes() for p in e.prompt_set.params()]
                clean &= now == frozen_bytes[e.prompt_set.task_id]
            if full and variant == "dp":
                history += evaluate_stage(bb, pool, ds.tasks, cfg,
                                          identity_mode="oracle")
        out["pred_r5"][variant] = avg(
            evaluate_stage(bb, pool, ds.tasks, cfg, identity_mode="predicted"), "r5")
        out.setdefault("isolation_ok", True)
        out["isolation_ok"] &= clean
        if full and variant == "dp":
            out["dp_history"] = history
            out["dp_oracle_r1"] = avg(
                [r for r in history if r.stage == len(ds.tasks)], "r1")
            out["dp_runtime_s"] = time.time() - t0
            # identity prediction, clean and with 4x the generator noise
            g = np.random.default_rng(123)
            for label, mult in (("identity_acc", 0), ("identity_acc_4x", 4)):
                accs = []
                for t in ds.tasks:
                    noisy = t.test.vision + g.normal(
                        0, mult * ds.spec.sigma_noise, t.test.vision.shape)
                    feats = encode_batched(bb, "vision", noisy)
                    accs.append((predict_tasks(feats, pool) == t.task_id).mean())
                out[label] = float(np.mean(accs)) * 100.0
    return out


@pytest.fixture(scope="session")
def study():
    results = {s: _run_seed(s, full=(s == 0)) for s in (0, 1, 2)}
    return results


def test_criterion_5_zero_oracle_forgetting(study):
    s0 = study[0]
    worst = 0.0
    n_tasks = max(r.stage for r in s0["dp_history"])
    for j in range(n_tasks):
        for direction in ("i2t", "t2i"):
            hist = [r for r in s0["dp_history"]
                    if r.task == j and r.direction == direction]
            fk, _ = forgetting(hist)
            worst = max(worst, *(abs(v) for v in fk.values()))
    ok = worst == 0.0 and s0["isolation_ok"] and s0["dp_runtime_s"] <= 600
    _report(5, ok, f"max |F@K| {worst} (want 0.0 exactly), frozen bytes "
                   f"{'unchanged' if s0['isolation_ok'] else 'CHANGED'}, "
                   f"runtime {s0['dp_runtime_s']:.0f}s (budget 600s)")


def test_criterion_6_learning_signal(study):
    s0 = study[0]
    gain = s0["dp_oracle_r1"] - s0["baseline_r1"]
    reg = json.loads(REGRESSION_FILE.read_text())
    tol = reg["tolerance_points"]
    drift_base = abs(s0["baseline_r1"] - reg["baseline_avg_r1"])
    drift_dp = abs(s0["dp_oracle_r1"] - reg["dp_oracle_avg_r1"])
    ok = gain >= 15.0 and drift_base <= tol and drift_dp <= tol
    _report(6, ok, f"dp oracle R@1 {s0['dp_oracle_r1']:.1f} vs baseline "
                   f"{s0['baseline_r1']:.1f} (+{gain:.1f}, want >= +15); "
                   f"regression drift base {drift_base:.2f} / dp {drift_dp:.2f}"
                   f" (tol {tol})")


def test_criterion_7_ablation_ordering(study):
    avgs = {v: float(np.mean([study[s]["pred_r5"][v] for s in (0, 1, 2)]))
            for v in VARIANTS}
    ok = (avgs["lpi-p"] >= avgs["lpi-m"] - 1.0
          and avgs["lpi-m"] >= avgs["dp"] - 1.0)
    _report(7, ok, "3-seed avg predicted R@5: "
            + " ".join(f"{v}={avgs[v]:.1f}" for v in ("lpi-p", "lpi-m", "dp"))
            + " (want lpi-p >= lpi-m >= dp, +/-1)")


def test_criterion_8_task_identity(study):
    s0 = study[0]
    ok = s0["identity_acc"] >= 90.0 and s0["identity_acc_4x"] < s0["identity_acc"]
    _report(8, ok, f"identity accuracy {s0['identity_acc']:.1f}% (want >= 90), "
                   f"at 4x noise {s0['identity_acc_4x']:.1f}% (must be lower)")


# ---------------------------------------------------------------------------
# criterion 9: determinism and resume (reduced scale; byte-level properties
# are independent of model size)
# ---------------------------------------------------------------------------

def test_criterion_9_determinism_and_resume(tmp_path):
    from tests.test_cli import TINY_CONFIG, TINY_SPEC
    spec = TINY_SPEC.replace("task_names = animal,food",
                             "task_names = animal,food,vehicle")
    (tmp_path / "run.cfg").write_text(TINY_CONFIG)
    (tmp_path / "gen.cfg").write_text(spec)
    base = ["--config", str(tmp_path / "run.cfg"), "--data", str(tmp_path / "d")]
    assert cli_main(["gen", "--spec", str(tmp_path / "gen.cfg"),
                     "--out", str(tmp_path / "d")]) == 0
    assert cli_main(["pretrain", *base, "--out", str(tmp_path / "bb.ckpt")]) == 0

    def train(out, backbone="bb.ckpt"):
        assert cli_main(["train", *base, "--backbone", str(tmp_path / backbone),
                         "--out", str(tmp_path / out), "--variant", "lpi-p"]) == 0

    train("a.ckpt")
    train("b.ckpt")
    identical_runs = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    train("resumed.ckpt", backbone="a.ckpt.stage2")
    resume_ok = (tmp_path / "resumed.ckpt").read_bytes() == (tmp_path / "a.ckpt").read_bytes()

    from promptcl.checkpoint import load_checkpoint, save_checkpoint
    arrays, manifest = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "c.ckpt", arrays,
                    {k: v for k, v in manifest.items()
                     if k not in ("version", "arrays", "checksums")})
    round_trip = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "c.ckpt").read_bytes()

    for out in ("m1", "m2"):
        assert cli_main(["eval", "--ckpt", str(tmp_path / "a.ckpt"),
                         "--data", str(tmp_path / "d"),
                         "--out", str(tmp_path / out)]) == 0
    metrics_same = (tmp_path / "m1" / "metrics.csv").read_bytes() \
        == (tmp_path / "m2" / "metrics.csv").read_bytes()

    ok = identical_runs and resume_ok and round_trip and metrics_same
    _report(9, ok, f"identical runs {identical_runs}, resume-from-stage-2 "
                   f"{resume_ok}, checkpoint round trip {round_trip}, "
                   f"metrics.csv byte-identical {metrics_same}")


# ---------------------------------------------------------------------------
# criterion 10: metric arithmetic
# ---------------------------------------------------------------------------

def test_criterion_10_metric_arithmetic(study):
    from promptcl.continual import MetricsRecord

    def rec(stage, r1, r5, r10):
        return MetricsRecord(stage=stage, task=0, direction="i2t",
                             identity_mode="oracle", r1=r1, r5=r5, r10=r10)

    # best-history (3, 2, 1) drop: F@1=3, F@5=2, F@10=1 -> Forgetting 2.0
    fk, avg = forgetting([rec(1, 53.0, 42.0, 31.0), rec(2, 50.0, 40.0, 30.0)])
    hand_ok = (fk == {1: 3.0, 5: 2.0, 10: 1.0}) and avg == 2.0

    _, neg = forgetting([rec(1, 10.0, 10.0, 10.0), rec(2, 30.0, 30.0, 30.0)])
    neg_ok = neg == -20.0

    records = study[0]["dp_history"]
    mono_ok = all(r.r1 <= r.r5 <= r.r10 for r in records) and len(records) > 0

    ok = hand_ok and neg_ok and mono_ok
    _report(10, ok, f"Forgetting((3,2,1))={avg} (want 2.0), negative F@K "
                    f"{neg} representable, R@1<=R@5<=R@10 on all "
                    f"{len(records)} emitted records: {mono_ok}")
