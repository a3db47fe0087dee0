# A miniature audio-only vs multimodal comparison, end to end in a couple of
# minutes. The full-size version lives in tests/directional.py.
#
#   python3 demos/04_tiny_experiment.py [work_dir]

import sys
from pathlib import Path

import numpy as np

from avsqa import trainer
from avsqa.datagen import CorpusConfig, build_corpus, read_manifest
from avsqa.model import ModelConfig

work = Path(sys.argv[1] if len(sys.argv) > 1 else "tiny_experiment")

cfg = CorpusConfig(n_train_speakers=10, n_test_speakers=2, duration_s=(1.0, 1.5), master_seed=3)
summary = build_corpus(cfg, work / "corpus")
print("records", summary["total"])
for key, n in summary["counts"].items():
    print(f"  {key:28s} {n}")

manifest = work / "corpus" / "manifest.jsonl"
corpus = trainer.Corpus(manifest)
runs = {}
for modality in ("audio_only", "multimodal"):
    tc = trainer.TrainConfig(mode="multi_task", modality=modality, learning_rate=1e-3, max_epochs=4, seed=3)
    ck = trainer.train(ModelConfig(width_multiplier=0.125), tc, manifest, out_dir=work / modality, corpus=corpus)
    runs[modality] = ck
    print(f"{modality}: best epoch {ck.epoch}, validation loss {ck.best_val_loss:.4f}")

# test-set correlations per (condition, task), pooled over noisy + enhanced
print("\ncondition task            audio_only  multimodal")
summaries = {m: trainer.evaluate(ck, manifest, corpus=corpus) for m, ck in runs.items()}
for condition in ("seen", "unseen"):
    for task in ("quality", "intelligibility"):
        cells = [summaries[m].cell(condition, "pooled", task) for m in runs]
        vals = [f"{c.lcc:10.3f}" if c and c.present else "    absent" for c in cells]
        print(f"{condition:9s} {task:15s} {vals[0]}  {vals[1]}")

# attention maps for one test utterance (the CSV export does the same)
rec = next(r for r in read_manifest(manifest) if r.split == "test")
root = manifest.parent
for m, ck in runs.items():
    res = trainer.predict(ck, root / rec.degraded_path, root / rec.video_path if m == "multimodal" else None)
    att = res["intelligibility_attention"]
    print(f"{m}: attention {att.shape}, peak key per query (first 8):", np.argmax(att, axis=1)[:8])
