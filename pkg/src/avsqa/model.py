"""Dual-branch audio-visual assessment network.

Audio branch: STFT magnitudes. Visual branch: a 3D convolution front-end
followed by a per-frame ResNet-18. The visual embeddings are linearly
upsampled to the audio frame rate, concatenated with the spectrogram and fed
to a CRNN trunk (conv blocks -> BLSTM -> dense -> dropout). Each task head is
a self-attention layer plus a linear frame scorer whose outputs are averaged
into the utterance score.

Batches are padded along time; ``mask`` (B x T, 1 = real frame) keeps padded
frames out of convolutions, the recurrence, attention keys, pooling and the
frame-level loss.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

TASKS = {
    "multi_task": ("quality", "intelligibility"),
    "quality_only": ("quality",),
    "intelligibility_only": ("intelligibility",),
}
MODALITIES = ("multimodal", "audio_only")


class ConfigError(ValueError):
    pass


def scale_width(n: int, mult: float) -> int:
    return max(1, int(round(n * mult)))


@dataclass
class ModelConfig:
    n_freq: int = 257
    d_v: int = 512
    visual_channels: int = 64
    resnet_channels: tuple = (64, 128, 256, 512)
    conv_channels: tuple = (16, 32, 64, 128)
    conv_layers_per_block: int = 3
    blstm_width: int = 128
    dense_width: int = 128
    dropout: float = 0.3
    attention_heads: int = 1
    tasks: str = "multi_task"
    alpha_q: float = 1.0
    alpha_i: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    width_multiplier: float = 1.0

    def validate(self):
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ConfigError("width_multiplier must lie in (0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.tasks not in TASKS:
            raise ConfigError(f"tasks must be one of {sorted(TASKS)}")
        if self.attention_heads != 1:
            raise ConfigError("only single-head attention is implemented")
        if min(self.alpha_q, self.alpha_i, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        w = self.task_weights()
        if all(v == 0 for v in w.values()):
            raise ConfigError("both task weights are zero")
        return self

    def scaled(self, n: int) -> int:
        return scale_width(n, self.width_multiplier)

    @property
    def visual_dim(self) -> int:
        return self.scaled(self.d_v)

    @property
    def hidden_dim(self) -> int:
        return self.scaled(self.dense_width)

    @property
    def task_names(self) -> tuple:
        return TASKS[self.tasks]

    def task_weights(self) -> dict:
        """Loss weight per active task; absent tasks get weight 0."""
        return {
            "quality": self.beta if "quality" in self.task_names else 0.0,
            "intelligibility": self.gamma if "intelligibility" in self.task_names else 0.0,
        }

    def frame_weights(self) -> dict:
        return {"quality": self.alpha_q, "intelligibility": self.alpha_i}

    def to_dict(self):
        d = asdict(self)
        d["resnet_channels"] = list(self.resnet_channels)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("resnet_channels", "conv_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------- init

def _fan_in_uniform_(weight: torch.Tensor):
    fan_in = weight[0].numel()
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound)


def init_parameters(module: nn.Module):
    """Fan-in uniform for affine/conv weights, orthogonal recurrent kernels,
    zero biases except LSTM forget gates at 1."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            _fan_in_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LSTM):
            hidden = m.hidden_size
            for name, p in m.named_parameters():
                if name.startswith("weight_ih"):
                    _fan_in_uniform_(p)
                elif name.startswith("weight_hh"):
                    for g in range(4):
                        nn.init.orthogonal_(p.data[g * hidden:(g + 1) * hidden])
                elif name.startswith("bias_ih"):
                    nn.init.zeros_(p)
                    p.data[hidden:2 * hidden] = 1.0
                elif name.startswith("bias_hh"):
                    nn.init.zeros_(p)


# ------------------------------------------------------------ visual branch

class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False),
                                          nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class VisualEncoder(nn.Module):
    """Conv3D (5x7x7) front-end + per-frame ResNet-18 with global average
    pooling; one embedding per input frame."""

    temporal_kernel = 5

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0 = cfg.scaled(cfg.visual_channels)
        self.front = nn.Conv3d(1, c0, (self.temporal_kernel, 7, 7), (1, 2, 2), (0, 3, 3), bias=False)
        self.front_bn = nn.BatchNorm2d(c0)
        stages = []
        c_in = c0
        for i, c in enumerate(cfg.resnet_channels):
            c_out = cfg.scaled(c)
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(BasicBlock(c_in, c_out, stride), BasicBlock(c_out, c_out, 1)))
            c_in = c_out
        self.stages = nn.Sequential(*stages)
        self.out_dim = c_in
        if self.out_dim != cfg.visual_dim:
            raise ConfigError("last ResNet width must equal d_v")

    def forward(self, videos: list[torch.Tensor]) -> list[torch.Tensor]:
        """``videos``: list of (M_i, 88, 88) tensors in [0, 1]."""
        pad = self.temporal_kernel // 2
        chunks, starts = [], []
        pos = 0
        for v in videos:
            if v.dim() != 3 or v.shape[1:] != (88, 88):
                raise ConfigError("video format: expected M x 88 x 88 grayscale frames")
            # replicate-pad in time so constant clips give constant embeddings
            chunks.append(torch.cat([v[:1].expand(pad, -1, -1), v, v[-1:].expand(pad, -1, -1)]))
            starts.append(pos)
            pos += v.shape[0] + 2 * pad
        stacked = torch.cat(chunks)[None, None]           # 1 x 1 x L x 88 x 88
        feats = self.front(stacked)[0].transpose(0, 1)     # (L - 4) x C x 44 x 44
        index = torch.cat([torch.arange(s, s + v.shape[0]) for s, v in zip(starts, videos)])
        x = feats[index]
        x = F.relu(self.front_bn(x))
        x = F.max_pool2d(x, 3, 2, 1)
        x = self.stages(x)
        emb = x.mean(dim=(2, 3))
        return list(torch.split(emb, [v.shape[0] for v in videos]))


def interpolation_matrix(m: int, t: int, dtype=torch.float64) -> torch.Tensor:
    """(t x m) linear-interpolation weights: row i samples the source at
    position i*(m-1)/(t-1); m == 1 broadcasts."""
    w = torch.zeros(t, m, dtype=dtype)
    if m == 1:
        w[:, 0] = 1.0
        return w
    if t == 1:
        w[0, 0] = 1.0
        return w
    for i in range(t):
        # exact rational position avoids endpoint rounding
        num = i * (m - 1)
        lo = num // (t - 1)
        frac = (num - lo * (t - 1)) / (t - 1)
        if frac == 0.0:
            w[i, lo] = 1.0
        else:
            w[i, lo] = 1.0 - frac
            w[i, lo + 1] = frac
    return w


def upsample_time(emb: torch.Tensor, t: int) -> torch.Tensor:
    """Linearly resample an (M x d_v) embedding sequence to ``t`` rows."""
    if emb.dim() != 2 or emb.shape[0] < 1 or t < 1:
        raise ValueError("upsample_time expects an M x d tensor with M >= 1 and T >= 1")
    m = emb.shape[0]
    if m == t:
        return emb
    return interpolation_matrix(m, t, emb.dtype) @ emb


def fuse(spec: torch.Tensor, vis: torch.Tensor | None, d_v: int | None = None) -> torch.Tensor:
    """Concatenate spectrogram and visual features on the feature axis.

    ``vis=None`` (audio-only) substitutes a zero block of width ``d_v``.
    Works on (T x .) or (B x T x .) tensors.
    """
    if vis is None:
        if d_v is None:
            raise ValueError("d_v required for the audio-only zero block")
        vis = spec.new_zeros(spec.shape[:-1] + (d_v,))
    if spec.shape[:-1] != vis.shape[:-1]:
        raise ValueError(f"time mismatch: spectrogram {tuple(spec.shape)} vs visual {tuple(vis.shape)}")
    return torch.cat([spec, vis], dim=-1)


# ------------------------------------------------------------------ trunk

class CRNN(nn.Module):
    """Four conv blocks (feature-axis downsampling only) -> BLSTM -> dense."""

    def __init__(self, cfg: ModelConfig, in_features: int):
        super().__init__()
        layers = []
        c_in = 1
        feat = in_features
        for c in cfg.conv_channels:
            c_out = cfg.scaled(c)
            for j in range(cfg.conv_layers_per_block):
                last = j == cfg.conv_layers_per_block - 1
                layers.append(nn.Conv2d(c_in, c_out, 3, (1, 2) if last else (1, 1), 1))
                c_in = c_out
            feat = (feat - 1) // 2 + 1
        self.convs = nn.ModuleList(layers)
        self.rnn_in = c_in * feat
        self.hidden = cfg.scaled(cfg.blstm_width)
        self.blstm = nn.LSTM(self.rnn_in, self.hidden, batch_first=True, bidirectional=True)
        self.dense = nn.Linear(2 * self.hidden, cfg.hidden_dim)
        self.dropout = cfg.dropout

    def forward(self, fused: torch.Tensor, mask: torch.Tensor, training: bool = False) -> torch.Tensor:
        b, t, _ = fused.shape
        m = mask.to(fused.dtype)[:, None, :, None]
        x = torch.asinh(fused)[:, None] * m   # magnitude compression
        for conv in self.convs:
            x = F.relu(conv(x)) * m
        x = x.permute(0, 2, 1, 3).reshape(b, t, -1)
        lengths = mask.sum(dim=1).to(torch.int64).cpu()
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.blstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=t)
        h = F.relu(self.dense(out))
        h = F.dropout(h, self.dropout, training=training)
        return h * mask.to(h.dtype)[..., None]


class TaskHead(nn.Module):
    """Single-head scaled dot-product self-attention + linear frame scorer."""

    def __init__(self, d_h: int):
        super().__init__()
        self.query = nn.Linear(d_h, d_h)
        self.key = nn.Linear(d_h, d_h)
        self.value = nn.Linear(d_h, d_h)
        self.score = nn.Linear(d_h, 1)
        self.d_h = d_h

    def attend(self, h: torch.Tensor, mask: torch.Tensor | None = None):
        """Return (attended, weights); weights rows are softmax distributions
        over the valid key frames."""
        q, k, v = self.query(h), self.key(h), self.value(h)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_h)
        if mask is not None:
            logits = logits.masked_fill(~mask.bool()[..., None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        return weights @ v, weights

    def frame_scores(self, attended: torch.Tensor) -> torch.Tensor:
        return self.score(attended).squeeze(-1)

    def forward(self, h, mask=None):
        attended, weights = self.attend(h, mask)
        return self.frame_scores(attended), weights


def pool_utterance(frames: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Average frame predictions over the (valid) time axis."""
    if mask is None:
        return frames.mean(dim=-1)
    m = mask.to(frames.dtype)
    return (frames * m).sum(dim=-1) / m.sum(dim=-1)


def loss_task(truth, utterance_pred, frames, alpha: float, mask=None):
    """Utterance squared error plus ``alpha`` times the mean frame squared
    error, averaged over the batch."""
    truth = torch.as_tensor(truth, dtype=frames.dtype)
    utterance_pred = torch.as_tensor(utterance_pred, dtype=frames.dtype)
    if frames.dim() == 1:
        frames = frames[None]
        truth = truth.reshape(1)
        utterance_pred = utterance_pred.reshape(1)
        mask = None if mask is None else mask[None]
    if mask is None:
        mask = torch.ones_like(frames)
    m = mask.to(frames.dtype)
    frame_err = (((truth[:, None] - frames) ** 2) * m).sum(dim=1) / m.sum(dim=1)
    per_utt = (truth - utterance_pred) ** 2 + alpha * frame_err
    return per_utt.mean()


def loss_total(l_quality, l_intelligibility, beta: float, gamma: float):
    """Weighted sum of the two task losses; a zero-weighted task is skipped."""
    if beta < 0 or gamma < 0:
        raise ConfigError("task weights must be non-negative")
    if beta == 0 and gamma == 0:
        raise ConfigError("both task weights are zero")
    total = 0.0
    if beta:
        total = total + beta * l_quality
    if gamma:
        total = total + gamma * l_intelligibility
    return total


# ------------------------------------------------------------------ model

class AVSQAModel(nn.Module):
    def __init__(self, cfg: ModelConfig, modality: str = "multimodal"):
        super().__init__()
        cfg.validate()
        if modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}")
        self.cfg = cfg
        self.modality = modality
        self.d_v = cfg.visual_dim
        # audio-only keeps the encoder so both modalities share one parameter layout
        self.visual = VisualEncoder(cfg)
        self.crnn = CRNN(cfg, cfg.n_freq + self.d_v)
        self.heads = nn.ModuleDict({name: TaskHead(cfg.hidden_dim) for name in cfg.task_names})
        init_parameters(self)

    @property
    def multimodal(self) -> bool:
        return self.modality == "multimodal"

    def visual_encode(self, videos: list[torch.Tensor]) -> list[torch.Tensor]:
        return self.visual(videos)

    def visual_features(self, videos, video_index, frame_counts, t_max: int) -> torch.Tensor:
        """Encode each distinct clip once and upsample it to each utterance's
        frame count; returns B x t_max x d_v (zero past each length)."""
        emb = self.visual_encode(videos)
        rows = []
        for vi, t in zip(video_index, frame_counts):
            up = upsample_time(emb[vi], int(t))
            rows.append(F.pad(up, (0, 0, 0, t_max - int(t))))
        return torch.stack(rows)

    def forward(self, spec, mask, videos=None, video_index=None, training=False):
        """``spec``: B x T x F padded spectrograms; ``mask``: B x T.

        Returns ``{task: {"frames", "utterance", "attention", "latent"}}``
        plus ``"hidden"`` (the trunk output). ``latent`` is the attended
        sequence fed to the frame scorer.
        """
        frame_counts = mask.sum(dim=1).to(torch.int64).tolist()
        if self.multimodal:
            if videos is None:
                raise ConfigError("multimodal model requires video input")
            vis = self.visual_features(videos, video_index, frame_counts, spec.shape[1])
        else:
            vis = None
        fused = fuse(spec, vis, self.d_v)
        h = self.crnn(fused, mask, training=training)
        out = {"hidden": h}
        for name, head in self.heads.items():
            latent, weights = head.attend(h, mask)
            frames = head.frame_scores(latent)
            out[name] = {"frames": frames, "utterance": pool_utterance(frames, mask),
                         "attention": weights, "latent": latent}
        return out

    def loss(self, outputs, targets: dict, mask):
        """Total loss and per-task components; ``targets`` maps task -> B tensor."""
        weights = self.cfg.task_weights()
        alphas = self.cfg.frame_weights()
        parts = {}
        for name in self.cfg.task_names:
            o = outputs[name]
            parts[name] = loss_task(targets[name], o["utterance"], o["frames"], alphas[name], mask)
        total = loss_total(parts.get("quality", 0.0), parts.get("intelligibility", 0.0),
                           weights["quality"], weights["intelligibility"])
        return total, parts


def snapshot(model: nn.Module) -> dict[str, np.ndarray]:
    """Immutable float64 copy of every parameter and buffer."""
    return {k: v.detach().cpu().numpy().astype(np.float64 if v.is_floating_point() else v.numpy().dtype).copy()
            for k, v in model.state_dict().items()}


def load_snapshot(model: nn.Module, params: dict[str, np.ndarray]):
    state = model.state_dict()
    missing = set(state) - set(params)
    extra = set(params) - set(state)
    if missing or extra:
        raise ConfigError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    new = {k: torch.as_tensor(params[k]).to(state[k].dtype).reshape(state[k].shape) for k in state}
    model.load_state_dict(new)
