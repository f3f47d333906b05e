"""
Cross-modal attention inside the mask decoder
=============================================

Runs an untrained model on one generated scene and inspects the fused
attention tensors that every decoder layer receives.
"""

import numpy as np
import torch

from binauralnet import scenegen as sg
from binauralnet import signal as sig
from binauralnet.audionet import BinauralNet, ModelConfig, count_parameters, spatialize
from binauralnet.evaluation import attention_heatmap, center_of_mass_x
from binauralnet.fusion import cosine_attention

torch.manual_seed(0)

# cosine similarity between every visual position and every audio bin
fv = torch.tensor([1.0, 2.0, 2.0]).reshape(1, 3, 1, 1)
fa = torch.tensor([2.0, 1.0, 2.0]).reshape(1, 3, 1, 1)
print("cos([1,2,2], [2,1,2]) = %.6f (8/9 = %.6f)" % (cosine_attention(fv, fa).item(), 8 / 9))

cfg = ModelConfig()
model = BinauralNet(cfg)
print("parameters: encoder %d, decoder %d, image tower %d, depth tower %d, fusion %d" % tuple(
    count_parameters(m) for m in (model.encoder, model.decoder, model.image_tower, model.depth_tower, model.fusion)))
print("decoder input widths:", cfg.decoder_in_widths())

gen = sg.GenConfig(max_sources=1)
scene = sg.make_sample(gen, seed=1, index=0)
src = scene.sources[0]
print(f"source at {src.azimuth:+.1f} deg")
stereo = sg.render_binaural(scene)
mono = sg.mono_mix(stereo)
frame = sg.render_image(scene)
depth = sg.render_depth(scene)

left, right, diag = spatialize(model, mono, frame, depth)
a = sig.stft(mono)
print("mask range: %.3f .. %.3f" % (diag["mask"].planes.min(), diag["mask"].planes.max()))
print("ears sum to the mixture:", np.allclose((left + right).planes, a.planes))

# 98 channels per layer: 49 image positions then 49 depth positions
for layer, att in enumerate(diag["attention"], start=1):
    heat = attention_heatmap(att[:49], cfg.tower.grid)
    print(f"layer {layer}: fused {att.shape}, entries in [{att.min():+.3f}, {att.max():+.3f}], "
          f"image-map center of mass x = {center_of_mass_x(heat):.3f}")
