# Walking a batch through the network one stage at a time.
#
#   python3 demos/03_model_walkthrough.py

import torch

from avsqa import model as M
from avsqa.model import AVSQAModel, ModelConfig

torch.manual_seed(0)
cfg = ModelConfig(width_multiplier=0.125)
net = AVSQAModel(cfg, "multimodal").eval()
print("d_v", cfg.visual_dim, "d_h", cfg.hidden_dim, "tasks", cfg.task_names)
print("parameters", sum(p.numel() for p in net.parameters()))

# one second of audio is 61 STFT frames; one second of video is 25 frames
spec = torch.rand(1, 61, 257) * 2
mask = torch.ones(1, 61)
video = torch.rand(25, 88, 88)

with torch.no_grad():
    (emb,) = net.visual_encode([video])
    print("visual embedding", tuple(emb.shape))          # 25 x d_v
    up = M.upsample_time(emb, 61)
    print("upsampled to audio rate", tuple(up.shape))     # 61 x d_v
    fused = M.fuse(spec, up[None])
    print("fused", tuple(fused.shape))                    # 1 x 61 x (257 + d_v)
    h = net.crnn(fused, mask)
    print("trunk output", tuple(h.shape))                 # 1 x 61 x d_h

    out = net(spec, mask, [video], [0])
    for task in cfg.task_names:
        att = out[task]["attention"][0]
        print(f"{task:15s} utterance {out[task]['utterance'].item():+.4f} "
              f"frames {tuple(out[task]['frames'].shape)} attention rows sum to "
              f"{att.sum(dim=1).min().item():.6f}..{att.sum(dim=1).max().item():.6f}")

# the audio-only baseline swaps in a zero visual block; shapes never change
ao = AVSQAModel(cfg, "audio_only").eval()
with torch.no_grad():
    print("audio-only trunk", tuple(ao(spec, mask)["hidden"].shape))

# losses: utterance error plus alpha times the mean frame error, per task
truth, utt, frames = torch.tensor([3.0]), torch.tensor([2.5]), torch.tensor([[2.0, 3.0]])
print("loss_task example", M.loss_task(truth, utt, frames, 1.0).item())   # 0.75
print("loss_total beta=2 gamma=3", M.loss_total(0.1, 0.2, 2.0, 3.0))       # 0.8
