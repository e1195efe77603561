"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the criterion lines
as they complete. The heavier end-to-end fixtures are shared across
criteria and computed once per session.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from audioadapt import pipeline, synth
from audioadapt import labels as pseudo
from audioadapt.cli import main as cli_main
from audioadapt.clustering import elbow_select
from audioadapt.encoder import AudioAdaptiveEncoder, AudioAttention, AudioEncoder, VisualEncoder
from audioadapt.evaluation import average_precision, mean_ap, tnr_absent
from audioadapt.losses import (LossConfig, absent_loss, audio_balanced_loss,
                               base_loss, cb_weight, recognizer_loss)
from audioadapt.recognizer import Recognizer, SoundVectorBank, build_sequence, recognizer_forward
from conftest import assert_grad_matches, random_simplex
from test_labels import brute_force_lowest
from test_evaluation import brute_force_ap

ACCEPT_SEEDS = (0, 1, 2, 3, 4)


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[ACCEPTANCE] criterion {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared end-to-end runs


def _stage1_target_metrics(cfg, ds, audio, visual):
    s1 = pipeline.train_stage1(cfg, ds, audio, visual)
    p = pipeline.stage1_predictions(s1.encoder, ds, "target")
    y = np.array(ds.target_labels())
    metrics = pipeline._target_metrics("t", p, ds)
    return s1, {
        "top1": float((p.argmax(1) == y).mean() * 100),
        "rare": float(np.mean([metrics["t_top1_bin_0-1"], metrics["t_top1_bin_2-10"]])),
    }


@pytest.fixture(scope="module")
def directional_runs():
    """Per seed: visual-only baseline, the three cumulative stage-1 legs,
    the full model (stage 2 on top), and pseudo-absent TNR per provenance."""
    t0 = time.perf_counter()
    rows = []
    for seed in ACCEPT_SEEDS:
        cfg = pipeline.default_config(seed=seed)
        spec = replace(cfg.data, seed=cfg.data.seed + seed)
        ds = synth.generate(spec)
        audio = pipeline.pretrain_audio(cfg, ds)
        visual = pipeline.pretrain_visual(cfg, ds)
        y = np.array(ds.target_labels())
        with torch.no_grad():
            p_vis = visual(torch.as_tensor(ds.visual_array("target")))[2].numpy()
        row = {"visual_only": float((p_vis.argmax(1) == y).mean() * 100)}

        legs = {
            "attention": dict(use_attention=True, use_absent=False, use_balanced=False),
            "absent": dict(use_attention=True, use_absent=True, use_balanced=False),
            "balanced": dict(use_attention=True, use_absent=True, use_balanced=True),
        }
        stage1_full = None
        for name, flags in legs.items():
            leg_cfg = replace(cfg, run_stage2=False, **flags)
            s1, metrics = _stage1_target_metrics(leg_cfg, ds, audio, visual)
            row[name] = metrics["top1"]
            row[f"rare_{name}"] = metrics["rare"]
            if name == "balanced":
                stage1_full = s1
        s2 = pipeline.train_stage2(cfg, ds, stage1_full)
        p_full = pipeline.recognizer_predictions(cfg, stage1_full, s2, ds, "target")
        row["full"] = float((p_full.argmax(1) == y).mean() * 100)

        for provenance in ("audio", "visual"):
            absent = pipeline.make_absent_labels(
                replace(cfg, pseudo_source=provenance), ds, audio, visual)
            row[f"tnr_{provenance}"] = tnr_absent(absent, ds.target_labels())
        rows.append(row)
    elapsed = time.perf_counter() - t0
    return rows, elapsed


@pytest.fixture(scope="module")
def noise_runs():
    """Mean target top-1 of the full model at three train/test noise settings."""
    settings = {(0.0, 0.0): [], (0.1, 0.1): [], (0.5, 0.0): []}
    for train_noise, test_noise in settings:
        for seed in ACCEPT_SEEDS:
            cfg = replace(pipeline.default_config(seed=seed),
                          train_noise=train_noise, test_noise=test_noise)
            metrics = pipeline.run_experiment(cfg).metrics
            settings[(train_noise, test_noise)].append(metrics["target_top1"])
    return {k: float(np.mean(v)) for k, v in settings.items()}


# ---------------------------------------------------------------------------
# criteria


def test_criterion_01_pseudo_label_oracles():
    rng = np.random.default_rng(202401)
    t0 = time.perf_counter()
    for _ in range(1000):
        k = int(rng.integers(2, 12))
        p = rng.dirichlet(np.ones(k))
        r = int(rng.integers(1, k))
        assert pseudo.absent_set_single(p, r) == brute_force_lowest(p, r)
    for _ in range(1000):
        M = int(rng.integers(2, 40))
        K = int(rng.integers(2, 7))
        P = rng.random((M, K))
        alpha = rng.random(K)
        gamma = float(rng.uniform(0.01, 1.0))
        mask = pseudo.absent_mask_multi(P, alpha, gamma)
        for k in range(K):
            c_k = int(math.floor((1 - alpha[k]) * gamma * M))
            expect = brute_force_lowest(P[:, k], c_k) if c_k else []
            assert sorted(np.flatnonzero(mask[:, k]).tolist()) == expect
    elapsed = time.perf_counter() - t0
    report(1, elapsed < 10.0,
           f"1000+1000 instances match brute-force sort oracles in {elapsed:.2f}s (< 10s)")


def test_criterion_02_closed_form_losses():
    import mpmath
    mpmath.mp.dps = 60
    ok1 = all(cb_weight(1, b) == 1.0 for b in (0.0, 0.5, 0.9, 0.999))
    oracle = float((1 - mpmath.mpf("0.999")) / (1 - mpmath.mpf("0.999") ** 1000))
    got = cb_weight(1000, 0.999)
    ok2 = abs(got - oracle) <= 1e-12 and abs(got - 1.5815e-3) <= 1e-6
    got3 = absent_loss(np.array([0.5]), [0]).item()
    ok3 = abs(got3 - 0.693147) <= 1e-9 or abs(got3 - math.log(2)) <= 1e-9
    report(2, ok1 and ok2 and ok3,
           f"cb_weight(1,b)=1 exact; cb_weight(1000,0.999)={got:.6e} (oracle {oracle:.6e}); "
           f"absent_loss(0.5)={got3:.9f}")


def test_criterion_03_gradient_checks():
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    cfg = LossConfig(beta=0.99, eta=0.5)
    for _ in range(100):
        k = int(rng.integers(4, 8))
        p = torch.tensor(rng.uniform(0.05, 0.85, size=k))
        q = sorted(rng.choice(k, size=2, replace=False).tolist())
        assert_grad_matches(lambda x: absent_loss(x, q), p)
    for _ in range(100):
        k = int(rng.integers(3, 7))
        p = torch.tensor(random_simplex(rng, k))
        y = int(rng.integers(0, k))
        assert_grad_matches(lambda x: audio_balanced_loss(x, y, 20, 4, cfg), p)
    for _ in range(100):
        k = int(rng.integers(3, 6))
        stacked = torch.tensor(np.concatenate([random_simplex(rng, k) for _ in range(3)]))
        y = int(rng.integers(0, k))
        assert_grad_matches(
            lambda x: recognizer_loss(x[:k], x[k:2 * k], x[2 * k:], y, cfg), stacked)

    # tiny encoder forward: H=8, n=2, K=3
    torch.manual_seed(5)
    enc = AudioAdaptiveEncoder(
        VisualEncoder(6, 8, 3), AudioEncoder(6, 8, 3),
        AudioAttention(8, 8, 8, depth=1, heads=2, max_clips=2)).double()
    vis = torch.randn(2, 2, 6, dtype=torch.float64)
    aud = torch.randn(2, 2, 6, dtype=torch.float64)
    y_enc = np.array([0, 2])
    _check_module_grads(enc, lambda: base_loss(enc(vis, aud).p_v, y_enc), rng, points=100)

    # tiny recognizer forward
    torch.manual_seed(6)
    rec = Recognizer(6, 6, 3, dim=8, depth=1, heads=2, max_clips=2).double()
    bank = SoundVectorBank(3, 8, 6, 6, 2).double()
    v = torch.randn(2, 2, 6, dtype=torch.float64)
    pa = torch.randn(2, 6, dtype=torch.float64)
    pv = torch.randn(2, 6, dtype=torch.float64)

    def rec_loss():
        tokens, h, hp = build_sequence("audio_token", v, None, 1, rec, bank=bank,
                                       pooled_audio=pa, pooled_visual=pv)
        p, _ = recognizer_forward(rec, tokens)
        return recognizer_loss(p, h, hp, np.array([1, 2]), cfg)

    _check_module_grads([rec, bank], rec_loss, rng, points=100)
    elapsed = time.perf_counter() - t0
    report(3, elapsed < 120.0,
           f"all gradient families match finite differences (rel err <= 1e-4) in {elapsed:.1f}s (< 2min)")


def _check_module_grads(modules, loss_fn, rng, points: int):
    if not isinstance(modules, list):
        modules = [modules]
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    checked = 0
    while checked < points:
        pi = int(rng.integers(len(params)))
        param = params[pi]
        i = int(rng.integers(param.numel()))
        for q in params:
            q.grad = None
        loss_fn().backward()
        grad = (param.grad if param.grad is not None else torch.zeros_like(param)).view(-1)
        backup = float(param.view(-1)[i])
        step = 1e-5
        with torch.no_grad():
            param.view(-1)[i] = backup + step
        up = float(loss_fn())
        with torch.no_grad():
            param.view(-1)[i] = backup - step
        down = float(loss_fn())
        with torch.no_grad():
            param.view(-1)[i] = backup
        fd = (up - down) / (2 * step)
        a = float(grad[i])
        err = abs(a - fd)
        assert err <= 1e-7 or err / max(abs(a), abs(fd)) <= 1e-4, \
            f"param {pi} coord {i}: autograd {a} vs fd {fd}"
        checked += 1


def test_criterion_04_elbow_recovery():
    t0 = time.perf_counter()
    hits = 0
    per_k = {}
    for trial in range(100):
        k = 2 + trial % 5  # cycle planted k through 2..6
        rng = np.random.default_rng(4000 + trial)
        centers = rng.standard_normal((k, 8))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        centers *= 10.0 * np.arange(1, k + 1)[:, None]  # 10-sigma separation
        pts = np.concatenate([c + rng.standard_normal((40, 8)) for c in centers])
        got = elbow_select(pts, 8, seed=trial)
        hit = got == k
        hits += hit
        per_k[k] = per_k.get(k, 0) + hit
    elapsed = time.perf_counter() - t0
    report(4, hits >= 95 and elapsed < 60.0,
           f"elbow recovered planted k in {hits}/100 trials (per k: {per_k}) in {elapsed:.1f}s (< 1min)")


def test_criterion_05_directional_ordering(directional_runs):
    rows, elapsed = directional_runs
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    gap = mean["full"] - mean["visual_only"]
    steps = [
        ("attention", mean["attention"] - mean["visual_only"]),
        ("absent", mean["absent"] - mean["attention"]),
        ("balanced", mean["balanced"] - mean["absent"]),
    ]
    ok = gap >= 5.0 and all(delta >= 0.0 for _, delta in steps) and elapsed < 900.0
    detail = (f"full {mean['full']:.1f} vs visual-only {mean['visual_only']:.1f} "
              f"(gap {gap:+.1f} >= 5.0); increments "
              + ", ".join(f"{name} {delta:+.2f}" for name, delta in steps)
              + f"; wall {elapsed:.0f}s (< 15min)")
    report(5, ok, detail)


def test_criterion_06_long_tail_rare_bins(directional_runs):
    rows, _ = directional_runs
    gain = float(np.mean([r["rare_balanced"] - r["rare_absent"] for r in rows]))
    report(6, gain >= 3.0,
           f"audio-balanced rare-bin gain over plain CE {gain:+.2f} points (>= 3.0)")


def test_criterion_07_tnr(directional_runs):
    rows, _ = directional_runs
    tnr_audio = float(np.mean([r["tnr_audio"] for r in rows]))
    tnr_visual = float(np.mean([r["tnr_visual"] for r in rows]))
    report(7, tnr_audio >= 90.0 and tnr_audio > tnr_visual,
           f"audio TNR {tnr_audio:.1f}% (>= 90) vs visual TNR {tnr_visual:.1f}%")


def test_criterion_08_noise_robustness(noise_runs):
    clean = noise_runs[(0.0, 0.0)]
    light = noise_runs[(0.1, 0.1)]
    heavy = noise_runs[(0.5, 0.0)]
    ok = abs(light - clean) <= 1.5 and (clean - heavy) >= 2.0
    report(8, ok,
           f"top-1 clean {clean:.1f}, 10% train+test noise {light:.1f} "
           f"(|delta| {abs(light - clean):.2f} <= 1.5), 50% train noise {heavy:.1f} "
           f"(degradation {clean - heavy:.2f} >= 2.0)")


def test_criterion_09_map_oracle():
    rng = np.random.default_rng(99)
    worked = mean_ap(np.array([[0.9], [0.8], [0.1]]), np.array([[1], [0], [1]]))
    ok = abs(worked - 100 * (1 + 2 / 3) / 2) <= 1e-9
    for _ in range(100):
        m = int(rng.integers(3, 15))
        k = int(rng.integers(1, 5))
        scores = rng.random((m, k))
        labels = (rng.random((m, k)) < 0.4).astype(int)
        labels[int(rng.integers(0, m)), :] = 1
        expect = np.mean([brute_force_ap(scores[:, c], labels[:, c]) for c in range(k)]) * 100
        if abs(mean_ap(scores, labels) - expect) > 1e-9:
            ok = False
            break
    report(9, ok, f"worked example AP = {worked / 100:.10f}; 100 random instances within 1e-9")


def test_criterion_10_cli_determinism(tmp_path):
    from test_pipeline import tiny_config

    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(tiny_config().to_dict()))
    outs = []
    for name in ("r1", "r2"):
        assert cli_main(["train", "--config", str(cfg_path), "--out", str(tmp_path / name)]) == 0
        run_dir = next(p for p in (tmp_path / name).iterdir() if p.is_dir())
        outs.append((run_dir / "metrics.csv").read_bytes())
    tables = []
    for name in ("a1", "a2"):
        assert cli_main(["ablate", "--axis", "r", "--values", "3", "--seeds", "0",
                         "--config", str(cfg_path), "--out", str(tmp_path / name)]) == 0
        tables.append((tmp_path / name / "table_r.csv").read_bytes())
    ok = outs[0] == outs[1] and tables[0] == tables[1]
    report(10, ok, "repeated train and ablate runs produce byte-identical metrics CSVs")
