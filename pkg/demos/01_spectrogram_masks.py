"""
Spectrograms, complex masks and left/right recombination
========================================================

A walk through the signal layer: analyze a waveform, mask it, and rebuild
two ears from a mixture plus a predicted difference signal.
"""

import numpy as np

from binauralnet import signal as sig

rng = np.random.default_rng(0)

# 0.63 s at 16 kHz; Hann window 400, hop 160, FFT 512
params = sig.DEFAULT_STFT
x = sig.Waveform(rng.standard_normal(10080) * 0.1, 16000)
spec = sig.stft(x, params)
print("planes [re/im, bins, frames]:", spec.planes.shape)

# the default window/hop pair does not overlap-add to a constant, but the
# weighted overlap-add inverse still reconstructs the interior exactly
weight = sig.steady_state_weight(params)
print("steady-state sum of squared windows: %.3f .. %.3f" % (weight.min(), weight.max()))
y = sig.istft(spec).samples[0]
core = sig.interior(spec.num_frames, params)
print("interior round-trip error: %.2e" % np.abs(y[core] - x.samples[0][core]).max())

# a complex mask multiplies every bin: (3 + 4i)(0.5 - 0.5i) = 3.5 + 0.5i
a = sig.Spectrogram(np.array([[[3.0]], [[4.0]]]), sig.StftParams(window_len=1, hop=1, fft_size=1))
m = sig.Spectrogram(np.array([[[0.5]], [[-0.5]]]), a.params)
print("masked bin:", sig.apply_mask(a, m).planes.ravel())

# the network predicts a mask M; the difference is O = M * A and the ears are
# (A + O) / 2 and (A - O) / 2, so they always sum back to the mixture
mask = sig.Spectrogram(np.tanh(rng.standard_normal(spec.planes.shape)), params)
left, right = sig.recombine(spec, sig.apply_mask(spec, mask))
print("max |L + R - A|:", np.abs((left + right).planes - spec.planes).max())

# a zero mask splits the mono signal evenly: the baseline every model must beat
left0, right0 = sig.recombine(spec, sig.apply_mask(spec, sig.Spectrogram(np.zeros_like(spec.planes), params)))
print("zero mask gives A/2 on both ears:", np.array_equal(left0.planes, spec.planes / 2))

# the two evaluation distances
print("STFT distance (masked vs zero mask): %.3f" % sig.stft_distance((left, right), (left0, right0)))
wl, wr = sig.istft(left), sig.istft(right)
w0 = sig.istft(left0)
stereo = sig.Waveform(np.vstack([wl.samples, wr.samples]), 16000)
split = sig.Waveform(np.vstack([w0.samples, w0.samples]), 16000)
print("ENV distance: %.4f" % sig.env_distance(stereo, split))
