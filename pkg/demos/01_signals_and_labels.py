# Signals and labels: from one synthetic utterance to STOI and pseudo-PESQ.
#
#   python3 demos/01_signals_and_labels.py

import numpy as np

from avsqa import dsp, oracle
from avsqa.datagen import CorpusConfig, build_noise_catalog, synth_clean

# a 2 s pseudo-speech utterance for speaker 3
clean = synth_clean(speaker_seed=3, utterance_seed=0, duration_s=2.0)
print("samples", len(clean), "rms", round(float(np.sqrt(dsp.power(clean.samples))), 4))
print("base F0 (Hz)", round(clean.meta["f0_hz"], 1))

# the STFT front-end: 512-sample Hann window, hop 256, no padding
spec = dsp.stft_magnitude(clean)
print("spectrogram T x F", spec.mags.shape)   # (123, 257)

# the noise catalogue: 5 families x 2 instances, split 8 seen / 2 unseen
catalog = build_noise_catalog(CorpusConfig(master_seed=1))
for clip in catalog:
    print(f"  {clip.noise_id:12s} {clip.family:8s} {clip.partition}")

# mix with one seen noise across the SNR grid and label each mixture;
# spectral subtraction gives the "enhanced" condition
noise = next(c for c in catalog if c.partition == "seen")
print("\n snr   stoi(noisy) stoi(enh)  pesq*(noisy) pesq*(enh)")
for snr in CorpusConfig().snr_grid:
    noisy = dsp.mix_at_snr(clean, noise, snr)
    enhanced = dsp.spectral_subtraction_enhance(noisy)
    a = oracle.label_pair(clean, noisy)
    b = oracle.label_pair(clean, enhanced)
    print(f"{snr:5.0f}   {a.intelligibility:.3f}       {b.intelligibility:.3f}      "
          f"{a.quality:.2f}         {b.quality:.2f}")

# the achieved SNR is exact: the residual is the scaled noise
noisy = dsp.mix_at_snr(clean, noise, -5.0)
resid = noisy.samples - clean.samples
print("\nachieved SNR", 10 * np.log10(dsp.power(clean.samples) / dsp.power(resid)))
print("clipped?", noisy.meta["clipped"])

# evaluation statistics used everywhere downstream
pred = np.array([0.2, 0.4, 0.4, 0.9])
truth = np.array([0.1, 0.5, 0.3, 0.8])
lcc, srcc, mse = oracle.eval_stats(pred, truth)
print(f"lcc {lcc:.4f}  srcc {srcc:.4f}  mse {mse:.4f}")
