# The visual stream: a procedurally drawn mouth whose opening follows the
# clean speech envelope, so video stays informative however loud the noise.
#
#   python3 demos/02_lip_video.py [out_dir]

import sys
from pathlib import Path

import numpy as np

from avsqa import dsp
from avsqa.datagen import (envelope_at_frames, measure_aperture, read_video, synth_clean,
                           synth_lip_video, write_video)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "lip_demo")

clean = synth_clean(speaker_seed=11, utterance_seed=2, duration_s=1.6)
clip = synth_lip_video(clean, fps=25, seed=0)
print("frames", clip.frames.shape, clip.frames.dtype)   # 40 x 88 x 88 uint8

# aperture measured back from the pixels vs the 8 Hz envelope at 25 fps
aperture = measure_aperture(clip.frames)
env = envelope_at_frames(clean, 25)
print("aperture/envelope correlation", round(float(np.corrcoef(aperture, env)[0, 1]), 3))

# a crude text plot of both series
for a, e in zip(aperture[::2], env[::2]):
    print(f"{'#' * int(a / 4):24s} | {'*' * int(60 * e)}")

# silence keeps the mouth shut: every frame identical
quiet = synth_lip_video(dsp.Waveform(np.zeros(16000)), fps=25)
print("silent clip frames identical:", bool(np.all(quiet.frames == quiet.frames[0])))

# frames on disk are plain PGM files, viewable with any image tool
write_video(out, clip)
back = read_video(out)
print("round trip exact:", bool(np.array_equal(back.frames, clip.frames)), "->", out)
