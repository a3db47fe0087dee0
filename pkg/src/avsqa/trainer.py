"""Training, checkpointing, evaluation and prediction."""
from __future__ import annotations

import base64
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, dsp
from .datagen import VideoClip, derive_seed, read_manifest, read_video
from .model import MODALITIES, AVSQAModel, ConfigError, ModelConfig, load_snapshot, snapshot
from .oracle import DegenerateCorrelation, PESQ_MAX, PESQ_MIN, eval_stats

log = logging.getLogger(__name__)

CKPT_HEADER = "AVSQA-CKPT-1"
MODES = {
    "single_task_quality": "quality_only",
    "single_task_intelligibility": "intelligibility_only",
    "multi_task": "multi_task",
}
CLAMP = {"quality": (PESQ_MIN, PESQ_MAX), "intelligibility": (0.0, 1.0)}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 25
    scheduler_factor: float = 0.1
    scheduler_patience: int = 3
    early_stop_patience: int = 5
    batch_size: int = 8
    grad_clip: float = 5.0
    seed: int = 1
    mode: str = "multi_task"
    modality: str = "multimodal"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    dtype: str = "float32"
    max_steps: int = 0  # 0 = unlimited
    target_loss: float = 0.0  # stop once a step's training loss falls below; 0 = off
    threads: int = 1

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    failed to improve for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 3):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr

    def state(self):
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs}

    def load(self, s):
        self.lr, self.best, self.bad_epochs = s["lr"], s["best"], s["bad_epochs"]


def lr_schedule(losses, lr: float, factor: float = 0.1, patience: int = 3) -> list[float]:
    """Learning rate in force after each epoch of ``losses``."""
    sched = PlateauScheduler(lr, factor, patience)
    return [sched.step(v) for v in losses]


# ------------------------------------------------------------ checkpoints

def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)  # keeps 0-d shapes, unlike ascontiguousarray
    return {"shape": list(a.shape), "dtype": "<f8", "values": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["values"]), dtype="<f8").reshape(d["shape"]).copy()


def _encode_params(params: dict) -> list:
    return [{"name": k, **_encode_array(v)} for k, v in params.items()]


def _decode_params(items: list) -> dict:
    return {it["name"]: _decode_array(it) for it in items}


@dataclass
class Checkpoint:
    params: dict
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    epoch: int = 0
    best_val_loss: float = math.inf
    seed: int = 1
    optimizer: dict = field(default_factory=dict)
    resume: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def modality(self) -> str:
        return self.train_cfg.modality

    def save(self, path) -> Path:
        doc = {
            "format": CKPT_HEADER,
            "version": __version__,
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.train_cfg.to_dict(),
            "seed": self.seed,
            "epoch": self.epoch,
            "best_val_loss": None if math.isinf(self.best_val_loss) else self.best_val_loss,
            "history": self.history,
            "parameters": _encode_params(self.params),
            "optimizer": _encode_optimizer(self.optimizer) if self.optimizer else None,
            "resume": _encode_resume(self.resume) if self.resume else None,
        }
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(CKPT_HEADER + "\n")
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != CKPT_HEADER:
                raise TrainingError(f"{path}: not an {CKPT_HEADER} checkpoint")
            doc = json.load(fh)
        best = doc["best_val_loss"]
        return cls(
            params=_decode_params(doc["parameters"]),
            model_cfg=ModelConfig.from_dict(doc["model_config"]),
            train_cfg=TrainConfig.from_dict(doc["train_config"]),
            epoch=doc["epoch"],
            best_val_loss=math.inf if best is None else best,
            seed=doc["seed"],
            optimizer=_decode_optimizer(doc["optimizer"]) if doc["optimizer"] else {},
            resume=_decode_resume(doc["resume"]) if doc["resume"] else {},
            history=doc["history"],
        )

    def build_model(self, dtype=torch.float64) -> AVSQAModel:
        """Inference model; float64 by default whatever the training dtype."""
        model = AVSQAModel(self.model_cfg, self.modality).to(dtype)
        load_snapshot(model, self.params)
        model.eval()
        return model


def _encode_optimizer(opt: dict) -> dict:
    return {
        "state": {str(k): {n: _encode_array(np.asarray(v)) for n, v in s.items()} for k, s in opt["state"].items()},
        "param_groups": opt["param_groups"],
    }


def _decode_optimizer(d: dict) -> dict:
    return {
        "state": {int(k): {n: _decode_array(v) for n, v in s.items()} for k, s in d["state"].items()},
        "param_groups": d["param_groups"],
    }


def _encode_resume(r: dict) -> dict:
    out = dict(r)
    out["params"] = _encode_params(r["params"])
    out["best_params"] = _encode_params(r["best_params"])
    out["torch_rng"] = base64.b64encode(r["torch_rng"]).decode("ascii")
    return out


def _decode_resume(d: dict) -> dict:
    out = dict(d)
    out["params"] = _decode_params(d["params"])
    out["best_params"] = _decode_params(d["best_params"])
    out["torch_rng"] = base64.b64decode(d["torch_rng"])
    return out


def _optimizer_to_plain(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    state = {k: {n: (v.detach().cpu().numpy().astype(np.float64) if torch.is_tensor(v) else np.float64(v))
                 for n, v in s.items()} for k, s in sd["state"].items()}
    groups = []
    for g in sd["param_groups"]:
        g = dict(g)
        g["betas"] = list(g["betas"])
        groups.append(g)
    return {"state": state, "param_groups": groups}


def _optimizer_from_plain(opt: torch.optim.Optimizer, plain: dict, dtype):
    state = {}
    for k, s in plain["state"].items():
        state[k] = {}
        for n, v in s.items():
            if n == "step":
                state[k][n] = torch.tensor(float(np.asarray(v).reshape(())), dtype=torch.float32)
            else:
                state[k][n] = torch.as_tensor(np.asarray(v)).to(dtype)
    groups = []
    for g in plain["param_groups"]:
        g = dict(g)
        g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})


# ------------------------------------------------------------------- data

@dataclass
class Example:
    utterance_id: str
    spec: np.ndarray           # T x F
    video_key: str
    targets: dict
    condition: str
    source: str
    split: str


class Corpus:
    """Features for a manifest, loaded once: spectrograms per record and
    normalised frames per distinct clip."""

    def __init__(self, manifest_path, splits=None, load_video=True):
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        records = read_manifest(self.manifest_path)
        if splits is not None:
            records = [r for r in records if r.split in splits]
        self.records = records
        self.examples: list[Example] = []
        self.videos: dict[str, np.ndarray] = {}
        for r in records:
            wave = dsp.read_wav(self.root / r.degraded_path)
            spec = dsp.stft_magnitude(wave).mags  # float64, so evaluation sees the same features as predict
            self.examples.append(Example(
                r.utterance_id, spec, r.video_path,
                {"quality": r.labels["quality"], "intelligibility": r.labels["intelligibility"]},
                r.condition, r.source, r.split))
            if load_video and r.video_path not in self.videos:
                self.videos[r.video_path] = read_video(self.root / r.video_path).normalized()

    def subset(self, split) -> list[Example]:
        return [e for e in self.examples if e.split == split]


def collate(examples: list[Example], videos: dict, dtype, with_video: bool = True):
    t_max = max(e.spec.shape[0] for e in examples)
    n_freq = examples[0].spec.shape[1]
    spec = torch.zeros(len(examples), t_max, n_freq, dtype=dtype)
    mask = torch.zeros(len(examples), t_max, dtype=dtype)
    for i, e in enumerate(examples):
        t = e.spec.shape[0]
        spec[i, :t] = torch.from_numpy(e.spec).to(dtype)
        mask[i, :t] = 1.0
    clips, index = None, None
    if with_video:
        keys = list(dict.fromkeys(e.video_key for e in examples))
        clips = [torch.from_numpy(videos[k]).to(dtype) for k in keys]
        index = [keys.index(e.video_key) for e in examples]
    targets = {task: torch.tensor([e.targets[task] for e in examples], dtype=dtype)
               for task in ("quality", "intelligibility")}
    return spec, mask, clips, index, targets


def grouped_batches(examples: list[Example], batch_size: int, seed, epoch: int) -> list[list[Example]]:
    """Shuffle clips, shuffle records within each clip, then cut the
    concatenation into batches so a batch spans few distinct videos."""
    rng = np.random.default_rng(derive_seed("batches", seed, epoch))
    groups: dict[str, list[Example]] = {}
    for e in examples:
        groups.setdefault(e.video_key, []).append(e)
    keys = sorted(groups)
    order = []
    for gi in rng.permutation(len(keys)):
        g = groups[keys[gi]]
        order.extend(g[j] for j in rng.permutation(len(g)))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def sequential_batches(examples, batch_size):
    return [examples[i:i + batch_size] for i in range(0, len(examples), batch_size)]


# ---------------------------------------------------------------- training

def _configure_torch(cfg: TrainConfig):
    torch.set_num_threads(cfg.threads)
    torch.use_deterministic_algorithms(True)


def _run_batch(model, batch, videos, dtype, training):
    spec, mask, clips, index, targets = collate(batch, videos, dtype, model.multimodal)
    out = model(spec, mask, clips, index, training=training)
    total, parts = model.loss(out, targets, mask)
    return total, parts, out


def validation_loss(model, examples, videos, cfg: TrainConfig) -> float:
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for batch in sequential_batches(examples, cfg.batch_size):
            loss, _, _ = _run_batch(model, batch, videos, cfg.torch_dtype, False)
            total += float(loss) * len(batch)
            n += len(batch)
    return total / max(n, 1)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, manifest, out_dir=None,
          resume_from=None, stop_after_epoch: int | None = None, corpus: Corpus | None = None) -> Checkpoint:
    """Fit a model on the manifest's train split, monitoring the validation
    split; returns the best-validation checkpoint.

    With ``out_dir`` the epoch metrics CSV, ``best.ckpt`` and ``last.ckpt``
    (full resume state) are written there after every epoch.
    """
    train_cfg.validate()
    model_cfg = ModelConfig.from_dict(model_cfg.to_dict())
    model_cfg.tasks = MODES[train_cfg.mode]
    model_cfg.validate()
    _configure_torch(train_cfg)
    dtype = train_cfg.torch_dtype
    if corpus is None:
        corpus = Corpus(manifest, splits=("train", "validation"),
                        load_video=train_cfg.modality == "multimodal")
    train_set = corpus.subset("train")
    val_set = corpus.subset("validation")
    if not train_set or not val_set:
        raise TrainingError("manifest needs non-empty train and validation subsets")

    torch.manual_seed(train_cfg.seed)
    model = AVSQAModel(model_cfg, train_cfg.modality).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                           betas=tuple(train_cfg.adam_betas), eps=train_cfg.adam_eps)
    sched = PlateauScheduler(train_cfg.learning_rate, train_cfg.scheduler_factor, train_cfg.scheduler_patience)
    best_params = snapshot(model)
    best_val, best_epoch, bad_epochs, start_epoch, step = math.inf, 0, 0, 0, 0
    history: list[dict] = []

    if resume_from is not None:
        ck = resume_from if isinstance(resume_from, Checkpoint) else Checkpoint.load(resume_from)
        r = ck.resume
        if not r:
            raise TrainingError("checkpoint carries no resume state")
        load_snapshot(model, r["params"])
        _optimizer_from_plain(opt, ck.optimizer, dtype)
        sched.load(r["scheduler"])
        best_params, best_val, best_epoch = r["best_params"], ck.best_val_loss, r["best_epoch"]
        bad_epochs, start_epoch, step = r["bad_epochs"], ck.epoch, r["step"]
        history = list(ck.history)
        torch.set_rng_state(torch.frombuffer(bytearray(r["torch_rng"]), dtype=torch.uint8))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def make_ckpt(params, epoch, resume=None):
        return Checkpoint(params=params, model_cfg=model_cfg, train_cfg=train_cfg, epoch=epoch,
                          best_val_loss=best_val, seed=train_cfg.seed,
                          optimizer=_optimizer_to_plain(opt) if resume else {},
                          resume=resume or {}, history=list(history))

    stopped = False
    for epoch in range(start_epoch + 1, train_cfg.max_epochs + 1):
        for g in opt.param_groups:
            g["lr"] = sched.lr
        model.train()
        losses = []
        for batch in grouped_batches(train_set, train_cfg.batch_size, train_cfg.seed, epoch):
            loss, _, _ = _run_batch(model, batch, corpus.videos, dtype, True)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            step += 1
            losses.append(loss.item())
            if (train_cfg.max_steps and step >= train_cfg.max_steps) or losses[-1] < train_cfg.target_loss:
                stopped = True
                break
        val = validation_loss(model, val_set, corpus.videos, train_cfg)
        lr_used = sched.lr
        if val < best_val:
            best_val, best_epoch, bad_epochs = val, epoch, 0
            best_params = snapshot(model)
        else:
            bad_epochs += 1
        sched.step(val)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val,
                        "lr": lr_used, "steps": step, "step_losses": losses})
        log.info("epoch %d train %.5f val %.5f lr %.1e", epoch, np.mean(losses), val, lr_used)
        if bad_epochs >= train_cfg.early_stop_patience:
            stopped = True
        if out is not None:
            write_metrics(out / "metrics.csv", history)
            make_ckpt(best_params, best_epoch).save(out / "best.ckpt")
            resume = {"params": snapshot(model), "best_params": best_params, "best_epoch": best_epoch,
                      "bad_epochs": bad_epochs, "step": step, "scheduler": sched.state(),
                      "torch_rng": torch.get_rng_state().numpy().tobytes()}
            make_ckpt(snapshot(model), epoch, resume).save(out / "last.ckpt")
        if stopped or (stop_after_epoch is not None and epoch >= stop_after_epoch):
            break
    return make_ckpt(best_params, best_epoch)


def write_metrics(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])


# -------------------------------------------------------------- evaluation

CONDITIONS = ("seen", "unseen")
SOURCES = ("noisy", "enhanced", "pooled")


@dataclass
class EvalCell:
    condition: str
    source: str
    task: str
    n: int
    lcc: float | None = None
    srcc: float | None = None
    mse: float | None = None

    @property
    def present(self) -> bool:
        return self.lcc is not None


@dataclass
class EvalSummary:
    cells: list[EvalCell]
    predictions: list[dict]

    def cell(self, condition, source, task) -> EvalCell | None:
        for c in self.cells:
            if (c.condition, c.source, c.task) == (condition, source, task):
                return c
        return None

    def to_rows(self):
        return [c for c in self.cells if c.present]


def predict_examples(model: AVSQAModel, examples, videos, dtype, batch_size=8) -> list[dict]:
    """Raw utterance scores per task, dropout off."""
    model.eval()
    rows = []
    with torch.no_grad():
        for batch in sequential_batches(examples, batch_size):
            spec, mask, clips, index, _ = collate(batch, videos, dtype, model.multimodal)
            out = model(spec, mask, clips, index, training=False)
            for i, e in enumerate(batch):
                row = {"utterance_id": e.utterance_id, "condition": e.condition, "source": e.source}
                for task in model.cfg.task_names:
                    raw = float(out[task]["utterance"][i])
                    lo, hi = CLAMP[task]
                    row[task] = {"truth": e.targets[task], "raw": raw, "clamped": min(max(raw, lo), hi)}
                rows.append(row)
    return rows


def summarize(predictions: list[dict], tasks) -> list[EvalCell]:
    cells = []
    for condition in CONDITIONS:
        for source in SOURCES:
            sel = [p for p in predictions if p["condition"] == condition
                   and (source == "pooled" or p["source"] == source)]
            for task in tasks:
                cell = EvalCell(condition, source, task, len(sel))
                if len(sel) >= 2:
                    pred = [p[task]["clamped"] for p in sel]
                    truth = [p[task]["truth"] for p in sel]
                    try:
                        cell.lcc, cell.srcc, cell.mse = eval_stats(pred, truth)
                    except DegenerateCorrelation:
                        pass
                cells.append(cell)
    return cells


def evaluate(checkpoint: Checkpoint, manifest, subset: str = "test", corpus: Corpus | None = None) -> EvalSummary:
    """Per (condition, source, task) LCC/SRCC/MSE on the clamped predictions."""
    _configure_torch(checkpoint.train_cfg)
    if corpus is None:
        corpus = Corpus(manifest, splits=(subset,), load_video=checkpoint.modality == "multimodal")
    model = checkpoint.build_model()
    preds = predict_examples(model, corpus.subset(subset), corpus.videos, torch.float64)
    return EvalSummary(summarize(preds, model.cfg.task_names), preds)


def write_summary_csv(path, summary: EvalSummary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "source", "task", "lcc", "srcc", "mse", "n"])
        for c in summary.to_rows():
            w.writerow([c.condition, c.source, c.task, repr(c.lcc), repr(c.srcc), repr(c.mse), c.n])


def write_predictions_csv(path, summary: EvalSummary, tasks):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["utterance_id", "condition", "source"]
        for t in tasks:
            header += [f"{t}_truth", f"{t}_predicted_raw", f"{t}_predicted_clamped"]
        w.writerow(header)
        for p in summary.predictions:
            row = [p["utterance_id"], p["condition"], p["source"]]
            for t in tasks:
                row += [repr(p[t]["truth"]), repr(p[t]["raw"]), repr(p[t]["clamped"])]
            w.writerow(row)


def read_predictions_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -------------------------------------------------------------- prediction

def predict(checkpoint: Checkpoint, wav_path, video_path=None) -> dict:
    """Score one utterance: utterance scores, frame scores and attention
    weights per task."""
    if checkpoint.modality == "multimodal" and video_path is None:
        raise ConfigError("multimodal checkpoint requires a video")
    _configure_torch(checkpoint.train_cfg)
    dtype = torch.float64
    model = checkpoint.build_model(dtype)
    wave = dsp.read_wav(wav_path)
    spec = torch.from_numpy(dsp.stft_magnitude(wave).mags).to(dtype)[None]
    mask = torch.ones(spec.shape[:2], dtype=dtype)
    clips, index = None, None
    if model.multimodal:
        clip = read_video(video_path) if not isinstance(video_path, VideoClip) else video_path
        clips, index = [torch.from_numpy(clip.normalized()).to(dtype)], [0]
    with torch.no_grad():
        out = model(spec, mask, clips, index, training=False)
    result = {"hidden": out["hidden"][0].numpy()}
    for task in model.cfg.task_names:
        result[task] = float(out[task]["utterance"][0])
        result[f"{task}_frames"] = out[task]["frames"][0].numpy()
        result[f"{task}_attention"] = out[task]["attention"][0].numpy()
        result[f"{task}_latent"] = out[task]["latent"][0].numpy()
    return result
