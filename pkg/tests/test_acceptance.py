"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``RESULTS`` and repeated in the terminal summary
(see conftest.py), so ``pytest tests/test_acceptance.py`` ends with the full
verdict table. Criterion 7 trains twelve models and takes well over an hour
on one core; deselect it with ``-m "not slow"``.
"""
import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from avsqa import cli, dsp, model as M, oracle, trainer
from avsqa.datagen import CorpusConfig, audit_protocol, build_corpus, synth_clean, synth_lip_video, write_video
from avsqa.dsp import NoiseClip, Waveform
from avsqa.model import AVSQAModel, ModelConfig

import directional
import gradcheck
from conftest import TOY_CORPUS, harmonic_fixture

DATA = Path(__file__).parent / "data"
RESULTS: list[str] = []


def verdict(n: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------ 1. gradients

def _grad_batch(seed):
    g = torch.Generator().manual_seed(seed)
    spec = (torch.rand(2, 9, 257, generator=g, dtype=torch.float64) * 3).requires_grad_()
    mask = torch.ones(2, 9, dtype=torch.float64)
    videos = [torch.rand(6, 88, 88, generator=g, dtype=torch.float64).requires_grad_() for _ in range(2)]
    targets = {"quality": torch.tensor([2.0, 3.5], dtype=torch.float64),
               "intelligibility": torch.tensor([0.3, 0.8], dtype=torch.float64)}
    return spec, mask, videos, targets


def _primitive_checks(seed):
    """Each building block on its own small random input."""
    g = torch.Generator().manual_seed(100 + seed)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64).requires_grad_()
    bad = []
    torch.manual_seed(seed)
    head = M.TaskHead(16).double()
    h = rnd(1, 5, 16)
    params = dict(head.named_parameters())
    bad += gradcheck.check_frozen(lambda: (head.attend(h)[0] ** 2).sum(), {"h": h, **params}, 3, seed)
    bad += gradcheck.check_frozen(lambda: (head.frame_scores(h) ** 2).sum(), {"h": h, **params}, 3, seed)

    src = rnd(4, 7)
    bad += gradcheck.check_frozen(lambda: (M.upsample_time(src, 11) ** 2).sum(), {"src": src}, 5, seed)
    spec, vis = rnd(1, 6, 5), rnd(1, 6, 3)
    bad += gradcheck.check_frozen(lambda: (M.fuse(spec, vis) ** 3).sum(), {"spec": spec, "vis": vis}, 5, seed)
    frames = rnd(3, 8)
    bad += gradcheck.check_frozen(lambda: (M.pool_utterance(frames) ** 2).sum(), {"frames": frames}, 5, seed)
    utt, truth = rnd(3), torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    bad += gradcheck.check_frozen(lambda: M.loss_task(truth, utt, frames, 0.7), {"utt": utt, "frames": frames}, 5, seed)

    cfg = ModelConfig(width_multiplier=0.125, dropout=0.0)
    crnn = M.CRNN(cfg, cfg.n_freq + cfg.visual_dim).double()
    fused = rnd(1, 9, cfg.n_freq + cfg.visual_dim)
    mask = torch.ones(1, 9, dtype=torch.float64)
    bad += gradcheck.check_frozen(lambda: (crnn(fused, mask) ** 2).sum(), {"fused": fused}, 4, seed)
    enc = M.VisualEncoder(cfg).double()
    vid = torch.rand(6, 88, 88, generator=g, dtype=torch.float64).requires_grad_()
    bad += gradcheck.check_frozen(lambda: (enc([vid])[0] ** 2).sum(), {"video": vid}, 4, seed)
    return bad


def test_criterion_1_gradient_suite():
    t0 = time.time()
    failures, checked = [], 0
    for seed in range(3):
        failures += _primitive_checks(seed)
        torch.manual_seed(seed)
        mdl = AVSQAModel(ModelConfig(width_multiplier=0.125), "multimodal").double()
        assert mdl.cfg.hidden_dim == 16
        spec, mask, videos, targets = _grad_batch(seed)

        def loss():
            out = mdl(spec, mask, videos, [0, 1], training=False)
            return mdl.loss(out, targets, mask)[0]

        tensors = {"spec": spec, "video0": videos[0], **dict(mdl.named_parameters())}
        checked += len(tensors)
        failures += gradcheck.check_frozen(loss, tensors, k=1, seed=seed)
    elapsed = time.time() - t0
    verdict(1, not failures and elapsed < 120,
            f"{checked} full-model tensors + primitives over 3 batches, {len(failures)} mismatches "
            f"(rel 1e-3), {elapsed:.0f}s (< 120s)")


# --------------------------------------------------------------- 2. STOI

def test_criterion_2_stoi_oracle():
    t0 = time.time()
    worst = 0.0
    with open(DATA / "stoi_golden.csv") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        clean = dsp.read_wav(DATA / "stoi" / f"{row['fixture_id']}_clean.wav")
        degraded = dsp.read_wav(DATA / "stoi" / f"{row['fixture_id']}_degraded.wav")
        worst = max(worst, abs(oracle.stoi(clean, degraded) - float(row["stoi_reference"])))
    x = harmonic_fixture(0)
    identity = abs(oracle.stoi(x, x) - 1.0)
    monotone = 0
    for seed in range(10):
        x = harmonic_fixture(seed)
        noise = NoiseClip(Waveform(np.random.default_rng(seed).standard_normal(len(x))), "white", "seen")
        s = [oracle.stoi(x, dsp.mix_at_snr(x, noise, snr)) for snr in (10.0, 0.0, -10.0)]
        monotone += s[0] > s[1] > s[2]
    elapsed = time.time() - t0
    verdict(2, len(rows) == 20 and worst <= 0.01 and identity <= 1e-6 and monotone == 10 and elapsed < 60,
            f"golden max |diff| {worst:.4f} on {len(rows)} pairs (<= 0.01), |stoi(x,x)-1| {identity:.1e}, "
            f"monotone {monotone}/10, {elapsed:.0f}s (< 60s)")


# ------------------------------------------------------------- 3. mixing

def test_criterion_3_mixing_exactness():
    worst = 0.0
    for seed in range(20):
        clean = harmonic_fixture(seed, 24000)
        noise = NoiseClip(Waveform(np.random.default_rng(50 + seed).standard_normal(9000)), "white", "seen")
        for snr in CorpusConfig().snr_grid:
            out = dsp.mix_at_snr(clean, noise, snr, offset=37 * seed)
            resid = out.samples - clean.samples
            achieved = 10 * np.log10(np.mean(clean.samples ** 2) / np.mean(resid ** 2))
            worst = max(worst, abs(achieved - snr))
    verdict(3, worst < 0.01, f"max |achieved - target| {worst:.2e} dB over 7 SNRs x 20 fixtures (< 0.01)")


# ------------------------------------------------------------ 4. losses

def test_criterion_4_loss_algebra():
    d = lambda v: torch.tensor(v, dtype=torch.float64)
    hand = M.loss_task(d([3.0]), d([2.5]), d([[2.0, 3.0]]), 1.0).item()
    e1 = abs(hand - 0.75)
    truth, utt, frames = d([3.0, 1.5]), d([2.0, 2.5]), d([[1.0, 4.0, 2.0], [0.5, 1.0, 2.0]])
    e2 = abs(M.loss_task(truth, utt, frames, 0.0).item() - torch.mean((truth - utt) ** 2).item())
    e3 = abs(M.loss_total(0.75, 0.25, 1.0, 1.0) - 1.0)
    e4 = abs(M.loss_total(0.3, 0.9, 1.0, 0.0) - 0.3)
    e5 = abs(M.loss_total(0.1, 0.2, 2.0, 3.0) - 0.8)
    worst = max(e1, e2, e3, e4, e5)
    verdict(4, e1 <= 1e-12 and e2 == 0.0 and max(e3, e4, e5) <= 1e-12,
            f"hand case error {e1:.1e}, alpha=0 error {e2:.1e}, weighted-sum max error {max(e3, e4, e5):.1e}")


# ------------------------------------------------ shared toy corpus/model

@pytest.fixture(scope="module")
def toy_checkpoint(toy_manifest):
    cfg = trainer.TrainConfig(max_epochs=1, learning_rate=1e-3, seed=4)
    return trainer.train(ModelConfig(width_multiplier=0.125), cfg, toy_manifest)


# ------------------------------------------------------------ 5. pooling

def test_criterion_5_pooling_consistency(toy_checkpoint, tmp_path):
    worst, n = 0.0, 0
    for k in range(50):
        clean = synth_clean(1000 + k, 7 + k, 1.0 + 0.02 * k)
        noise = NoiseClip(Waveform(np.random.default_rng(k).standard_normal(8000) * 0.1), "white", "seen")
        noisy = dsp.mix_at_snr(clean, noise, float(k % 7 * 5 - 20))
        dsp.write_wav(tmp_path / f"{k}.wav", noisy)
        write_video(tmp_path / f"v{k}", synth_lip_video(clean, seed=k))
        res = trainer.predict(toy_checkpoint, tmp_path / f"{k}.wav", tmp_path / f"v{k}")
        for task in ("quality", "intelligibility"):
            worst = max(worst, abs(float(np.mean(res[f"{task}_frames"])) - res[task]))
        n += 1
    verdict(5, n == 50 and worst <= 1e-9, f"max |mean(frames) - utterance| {worst:.1e} on {n} utterances (<= 1e-9)")


# ------------------------------------------------------------ 6. overfit

OVERFIT = dict(learning_rate=1e-3, batch_size=16, max_epochs=500, max_steps=500, scheduler_patience=1000,
               early_stop_patience=1000, target_loss=0.01, seed=1, mode="multi_task", modality="multimodal")


def test_criterion_6_overfit(toy_manifest):
    corpus = trainer.Corpus(toy_manifest, splits=("train", "validation"))
    assert len(corpus.subset("train")) == 16
    runs = []
    for _ in range(2):
        ck = trainer.train(ModelConfig(width_multiplier=0.25), trainer.TrainConfig(**OVERFIT), toy_manifest,
                           corpus=corpus)
        runs.append([l for h in ck.history for l in h["step_losses"]])
    a, b = runs
    steps = next((i + 1 for i, l in enumerate(a) if l < 0.01), None)
    drift = max(abs(x - y) for x, y in zip(a, b)) if len(a) == len(b) else math.inf
    verdict(6, steps is not None and steps <= 500 and drift <= 1e-9,
            f"training loss < 0.01 after {steps} steps (<= 500; final {a[-1]:.4f}), repeat max drift {drift:.1e}")


# ------------------------------------------------------- 7. directional

@pytest.mark.slow
def test_criterion_7_directional(tmp_path_factory):
    root = os.environ.get("AVSQA_DIRECTIONAL_DIR") or tmp_path_factory.mktemp("directional")
    rows, result, elapsed = directional.experiment(root)
    print(directional.report(rows))
    parts = []
    for mode, r in result.items():
        gaps = ", ".join(f"{g:+.3f}" for g in r["gaps"])
        parts.append(f"{mode}: gaps [{gaps}] {r['wins']}/3 >= 0.05, mean {r['mean_gap']:+.3f}")
    ok = all(r["pass"] for r in result.values())
    verdict(7, ok, "unseen intelligibility LCC multimodal - audio_only; " + "; ".join(parts)
            + f"; {elapsed / 60:.0f} min on this machine")


# ----------------------------------------------------------- 8. protocol

def test_criterion_8_protocol_integrity(tmp_path):
    build_corpus(CorpusConfig(master_seed=1), tmp_path)
    audit = audit_protocol(tmp_path / "manifest.jsonl")
    ok = not audit["train_unseen_leaks"] and not audit["condition_mismatches"] \
        and not audit["train_unseen_overlap"] \
        and (audit["n_seen"], audit["n_unseen"]) == (8, 2)
    verdict(8, ok, f"{len(audit['train_unseen_leaks'])} unseen ids in train, "
                   f"{len(audit['train_unseen_overlap'])} train/unseen-test overlaps, "
                   f"catalog {audit['n_seen']} seen / {audit['n_unseen']} unseen (8/2)")


# ---------------------------------------------------------- 9. eval stats

def _brute_ranks(v):
    # average rank: 1 + (#strictly smaller) + (#equal - 1) / 2
    return [1 + sum(w < x for w in v) + (sum(w == x for w in v) - 1) / 2 for x in v]


def _brute_pearson(a, b):
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    num = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    den = math.sqrt(math.fsum((x - ma) ** 2 for x in a) * math.fsum((y - mb) ** 2 for y in b))
    return num / den


def test_criterion_9_eval_stats():
    rng = np.random.default_rng(9)
    worst, ties = 0.0, 0
    for k in range(1000):
        n = int(rng.integers(3, 40))
        if k % 2:
            # coarse values so ties are common
            p, t = rng.integers(0, 6, n).astype(float), rng.integers(0, 6, n).astype(float)
            if np.all(p == p[0]) or np.all(t == t[0]):
                p[0], t[0] = p[0] + 1, t[0] + 1
        else:
            p, t = rng.normal(size=n), rng.normal(size=n)
        ties += len(set(p)) < n
        lcc, srcc, mse = oracle.eval_stats(p, t)
        pl, tl = p.tolist(), t.tolist()
        ref = (_brute_pearson(pl, tl), _brute_pearson(_brute_ranks(pl), _brute_ranks(tl)),
               math.fsum((x - y) ** 2 for x, y in zip(pl, tl)) / n)
        worst = max(worst, abs(lcc - ref[0]), abs(srcc - ref[1]), abs(mse - ref[2]))
    verdict(9, worst <= 1e-12, f"max deviation from brute force {worst:.1e} on 1000 pairs ({ties} with ties)")


# ------------------------------------------------------ 10. reproducibility

def _pipeline(root: Path, config: Path):
    corpus, run, ev = root / "corpus", root / "run", root / "eval"
    codes = [cli.main(["synth", "--config", str(config), "--seed", "7", "--out", str(corpus)])]
    codes.append(cli.main(["train", "--config", str(config), "--seed", "7", "--out", str(run),
                           "--manifest", str(corpus / "manifest.jsonl")]))
    codes.append(cli.main(["eval", "--config", str(config), "--seed", "7", "--out", str(ev),
                           "--checkpoint", str(run / "best.ckpt"), "--manifest", str(corpus / "manifest.jsonl")]))
    files = {"manifest": corpus / "manifest.jsonl", "metrics": run / "metrics.csv",
             "summary": ev / "summary.csv", "predictions": ev / "predictions.csv"}
    return codes, {k: p.read_bytes() for k, p in files.items()}


def test_criterion_10_reproducibility(tmp_path):
    config = tmp_path / "run.json"
    toy = {f"corpus.{k}": (list(v) if isinstance(v, tuple) else v) for k, v in TOY_CORPUS.items()
           if k != "master_seed"}
    toy.update({"model.width_multiplier": 0.125, "train.max_epochs": 2, "train.learning_rate": 1e-3})
    config.write_text(json.dumps(toy, indent=1))
    codes_a, a = _pipeline(tmp_path / "a", config)
    codes_b, b = _pipeline(tmp_path / "b", config)
    same = [k for k in a if a[k] == b[k]]
    ok = codes_a == codes_b == [0, 0, 0] and len(same) == len(a)
    verdict(10, ok, f"exit codes {codes_a}/{codes_b}; byte-identical: {', '.join(same)}")
