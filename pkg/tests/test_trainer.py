import math

import numpy as np
import pytest
import torch

from avsqa import trainer
from avsqa.datagen import read_manifest
from avsqa.model import ConfigError, ModelConfig
from avsqa.oracle import eval_stats
from avsqa.trainer import Checkpoint, Corpus, TrainConfig, lr_schedule

TINY = ModelConfig(width_multiplier=0.125)


def quick_cfg(**kw):
    base = dict(max_epochs=2, batch_size=8, seed=3, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus(toy_manifest):
    return Corpus(toy_manifest)


@pytest.fixture(scope="module")
def trained(toy_manifest, corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    ck = trainer.train(TINY, quick_cfg(), toy_manifest, out_dir=out, corpus=corpus)
    return ck, out


# ---------------------------------------------------------------- schedule

def test_plateau_flat_sequence_patience_two():
    lrs = lr_schedule([1.0, 1.0, 1.0], 1e-4, factor=0.1, patience=2)
    assert lrs[:2] == [1e-4, 1e-4]
    assert lrs[2] == pytest.approx(1e-5, rel=1e-12)


def test_plateau_resets_after_reduction():
    lrs = lr_schedule([1.0] * 5, 1.0, factor=0.1, patience=2)
    assert lrs == pytest.approx([1.0, 1.0, 0.1, 0.1, 0.01])


def test_plateau_improvement_keeps_rate():
    assert lr_schedule([3.0, 2.0, 1.0, 0.5], 0.01, patience=1) == [0.01] * 4


def test_schedule_is_pure():
    seq = [1.0, 0.9, 0.95, 0.97, 0.96, 0.8]
    assert lr_schedule(seq, 1e-3, patience=2) == lr_schedule(seq, 1e-3, patience=2)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(scheduler_patience=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(modality="video_only").validate()


# ---------------------------------------------------------------- batching

def test_grouped_batches_cover_each_record_once(corpus):
    train = corpus.subset("train")
    batches = trainer.grouped_batches(train, 5, seed=1, epoch=2)
    ids = [e.utterance_id for b in batches for e in b]
    assert sorted(ids) == sorted(e.utterance_id for e in train)
    assert all(len(b) <= 5 for b in batches)


def test_grouped_batches_depend_on_seed_and_epoch(corpus):
    train = corpus.subset("train")
    order = lambda s, ep: [e.utterance_id for b in trainer.grouped_batches(train, 4, s, ep) for e in b]
    assert order(1, 1) == order(1, 1)
    assert order(1, 1) != order(1, 2)


def test_collate_masks_padding(corpus):
    batch = corpus.subset("train")[:3]
    spec, mask, clips, index, targets = trainer.collate(batch, corpus.videos, torch.float64)
    for i, e in enumerate(batch):
        t = e.spec.shape[0]
        assert mask[i].sum() == t
        assert torch.all(spec[i, t:] == 0)
    assert len(clips) == len(set(e.video_key for e in batch))


# ---------------------------------------------------------------- training

def test_train_writes_artifacts(trained):
    ck, out = trained
    assert (out / "metrics.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,lr"
    assert len((out / "metrics.csv").read_text().splitlines()) == 3
    assert (out / "best.ckpt").read_text().startswith("AVSQA-CKPT-1\n")
    assert (out / "last.ckpt").exists()


def test_best_checkpoint_is_best_epoch(trained):
    ck, _ = trained
    vals = [h["val_loss"] for h in ck.history]
    assert ck.best_val_loss == min(vals)
    assert ck.history[ck.epoch - 1]["val_loss"] == ck.best_val_loss


def test_training_deterministic(toy_manifest, corpus):
    runs = [trainer.train(TINY, quick_cfg(max_epochs=1), toy_manifest, corpus=corpus) for _ in range(2)]
    a, b = (r.history[0]["step_losses"] for r in runs)
    assert len(a) == len(b) > 0
    assert np.max(np.abs(np.array(a) - np.array(b))) <= 1e-9


def test_divergence_aborts_with_context(toy_manifest, corpus):
    with pytest.raises(trainer.TrainingError, match=r"non-finite loss at epoch 1, step \d+"):
        trainer.train(TINY, quick_cfg(max_epochs=1, learning_rate=math.inf), toy_manifest, corpus=corpus)


def test_needs_validation_split(tmp_path, toy_manifest):
    lines = [l for l in toy_manifest.read_text().splitlines() if '"validation"' not in l]
    m = toy_manifest.parent / "no_val.jsonl"
    m.write_text("\n".join(lines) + "\n")
    with pytest.raises(trainer.TrainingError, match="validation"):
        trainer.train(TINY, quick_cfg(max_epochs=1), m)


def test_resume_matches_uninterrupted(toy_manifest, corpus, tmp_path):
    cfg = quick_cfg(max_epochs=3, batch_size=6)
    full = trainer.train(TINY, cfg, toy_manifest, out_dir=tmp_path / "full", corpus=corpus)
    trainer.train(TINY, cfg, toy_manifest, out_dir=tmp_path / "part", corpus=corpus, stop_after_epoch=1)
    resumed = trainer.train(TINY, cfg, toy_manifest, out_dir=tmp_path / "part", corpus=corpus,
                            resume_from=tmp_path / "part" / "last.ckpt")
    assert [h["step_losses"] for h in resumed.history] == [h["step_losses"] for h in full.history]
    for k in full.params:
        assert np.array_equal(full.params[k], resumed.params[k]), k
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()


def test_resume_needs_resume_state(trained, toy_manifest, corpus):
    ck, out = trained
    with pytest.raises(trainer.TrainingError, match="resume"):
        trainer.train(TINY, quick_cfg(max_epochs=3), toy_manifest, corpus=corpus, resume_from=out / "best.ckpt")


# -------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bit_equal(trained, toy_manifest, corpus, tmp_path):
    ck, _ = trained
    path = ck.save(tmp_path / "x.ckpt")
    back = Checkpoint.load(path)
    assert back.model_cfg == ck.model_cfg and back.train_cfg == ck.train_cfg
    assert back.epoch == ck.epoch and back.seed == ck.seed
    for k in ck.params:
        assert np.array_equal(back.params[k], ck.params[k])
    a = trainer.evaluate(ck, toy_manifest, corpus=corpus)
    b = trainer.evaluate(back, toy_manifest, corpus=corpus)
    assert a.predictions == b.predictions
    assert [(c.lcc, c.srcc, c.mse) for c in a.cells] == [(c.lcc, c.srcc, c.mse) for c in b.cells]


def test_checkpoint_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_text("NOT-A-CKPT\n{}")
    with pytest.raises(trainer.TrainingError, match="AVSQA-CKPT-1"):
        Checkpoint.load(p)


def test_checkpoint_stores_float64_arrays(trained):
    ck, out = trained
    text = (out / "best.ckpt").read_text()
    assert '"dtype": "<f8"' in text


# --------------------------------------------------------------- evaluate

def test_evaluate_deterministic(trained, toy_manifest, corpus):
    ck, _ = trained
    a = trainer.evaluate(ck, toy_manifest, corpus=corpus)
    b = trainer.evaluate(ck, toy_manifest, corpus=corpus)
    assert a.predictions == b.predictions


def test_summary_matches_csv_recomputation(trained, toy_manifest, corpus, tmp_path):
    ck, _ = trained
    summary = trainer.evaluate(ck, toy_manifest, corpus=corpus)
    tasks = ck.build_model().cfg.task_names
    trainer.write_predictions_csv(tmp_path / "p.csv", summary, tasks)
    rows = trainer.read_predictions_csv(tmp_path / "p.csv")
    n_test = sum(r.split == "test" for r in read_manifest(toy_manifest))
    assert len(rows) == n_test
    for cell in summary.to_rows():
        sel = [r for r in rows if r["condition"] == cell.condition
               and (cell.source == "pooled" or r["source"] == cell.source)]
        pred = [float(r[f"{cell.task}_predicted_clamped"]) for r in sel]
        truth = [float(r[f"{cell.task}_truth"]) for r in sel]
        assert eval_stats(pred, truth) == (cell.lcc, cell.srcc, cell.mse)
        assert len(sel) == cell.n


def test_perfect_predictions_summarize_to_one():
    preds = []
    for k in range(6):
        q, i = 1.5 + 0.4 * k, 0.3 + 0.1 * k
        preds.append({"utterance_id": f"u{k}", "condition": "seen", "source": "noisy" if k % 2 else "enhanced",
                      "quality": {"truth": q, "raw": q, "clamped": q},
                      "intelligibility": {"truth": i, "raw": i, "clamped": i}})
    cells = [c for c in trainer.summarize(preds, ("quality", "intelligibility")) if c.present]
    assert cells
    for c in cells:
        assert c.lcc == pytest.approx(1.0, abs=1e-12) and c.srcc == pytest.approx(1.0, abs=1e-12)
        assert c.mse == 0.0


def test_empty_cells_marked_absent():
    preds = [{"utterance_id": "u", "condition": "seen", "source": "noisy",
              "quality": {"truth": 2.0, "raw": 2.0, "clamped": 2.0}}]
    cells = trainer.summarize(preds, ("quality",))
    assert all(not c.present for c in cells)
    unseen = [c for c in cells if c.condition == "unseen"]
    assert all(c.n == 0 for c in unseen)


def test_reported_predictions_are_clamped(trained, toy_manifest, corpus):
    ck, _ = trained
    for p in trainer.evaluate(ck, toy_manifest, corpus=corpus).predictions:
        assert 1.0 <= p["quality"]["clamped"] <= 4.5
        assert 0.0 <= p["intelligibility"]["clamped"] <= 1.0
        assert p["quality"]["clamped"] == min(max(p["quality"]["raw"], 1.0), 4.5)


# ---------------------------------------------------------------- predict

def _test_record(manifest):
    return next(r for r in read_manifest(manifest) if r.split == "test")


def test_predict_pooling_and_attention(trained, toy_manifest):
    ck, _ = trained
    rec = _test_record(toy_manifest)
    root = toy_manifest.parent
    res = trainer.predict(ck, root / rec.degraded_path, root / rec.video_path)
    for task in ("quality", "intelligibility"):
        assert abs(res[f"{task}_frames"].mean() - res[task]) <= 1e-9
        assert np.allclose(res[f"{task}_attention"].sum(axis=1), 1.0, atol=1e-6)
    again = trainer.predict(ck, root / rec.degraded_path, root / rec.video_path)
    assert all(np.array_equal(res[k], again[k]) for k in res)


def test_predict_multimodal_needs_video(trained, toy_manifest):
    ck, _ = trained
    rec = _test_record(toy_manifest)
    with pytest.raises(ConfigError, match="video"):
        trainer.predict(ck, toy_manifest.parent / rec.degraded_path)


def test_predict_matches_batched_evaluation(trained, toy_manifest, corpus):
    ck, _ = trained
    root = toy_manifest.parent
    preds = {p["utterance_id"]: p for p in trainer.evaluate(ck, toy_manifest, corpus=corpus).predictions}
    rec = _test_record(toy_manifest)
    res = trainer.predict(ck, root / rec.degraded_path, root / rec.video_path)
    # batched and padded evaluation agrees with the single-utterance path
    assert res["quality"] == pytest.approx(preds[rec.utterance_id]["quality"]["raw"], abs=1e-9)
