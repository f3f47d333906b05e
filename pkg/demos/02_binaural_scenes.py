"""
Synthetic binaural scenes
=========================

How the dataset generator turns a scene description into stereo audio, an
RGB frame and a depth map, and which symmetries it guarantees.
"""

import numpy as np

from binauralnet import scenegen as sg

# pan law and interaural delay for a source 30 degrees to the right
gl, gr = sg.pan_gains(30.0)
print("gains left/right: %.4f / %.4f (power %.3f)" % (gl, gr, gl ** 2 + gr ** 2))
print("interaural delay: %.2f us" % (sg.interaural_delay(30.0) * 1e6))

# draw a scene from the generator's own seeded stream
cfg = sg.GenConfig(max_sources=2)
scene = sg.make_sample(cfg, seed=7, index=3)
for s in scene.sources:
    print(f"  {s.generator:5s} at {s.azimuth:+6.1f} deg, {s.distance:.2f} m")

stereo = sg.render_binaural(scene, cfg.sample_rate)
left, right = stereo.samples
print("samples per channel:", left.size)
print("channel energy left/right: %.3f / %.3f" % ((left ** 2).sum(), (right ** 2).sum()))

# the listener's left/right mirror image of the scene swaps the ears exactly
mirror = sg.render_binaural(scene.mirrored(), cfg.sample_rate).samples
print("mirror swaps channels exactly:", np.array_equal(mirror, stereo.samples[::-1]))

# the image and depth map flip horizontally with the scene
img = sg.render_image(scene, cfg.image_size, cfg.patch_size, cfg.blob_scale)
depth = sg.render_depth(scene, cfg.image_size, cfg.patch_size, cfg.blob_scale)
print("frame", img.shape, img.dtype, "| depth range %.1f .. %.1f m" % (depth.min(), depth.max()))
print("frame mirrors:", np.array_equal(
    sg.render_image(scene.mirrored(), cfg.image_size, cfg.patch_size, cfg.blob_scale), img[:, ::-1]))

# horizontal extent of the sources in the frame
cols = np.nonzero((img != sg.BACKGROUND_RGB).any(axis=-1))[1]
print("occupied columns: %d .. %d of %d" % (cols.min(), cols.max(), img.shape[1]))

# a centered scene produces identical channels, so the zero-mask split is exact there
centered = sg.SceneSpec(tuple(sg.SourceSpec(0.0, s.distance, s.generator, s.params, s.seed)
                              for s in scene.sources), scene.duration)
c = sg.render_binaural(centered).samples
print("azimuth 0 gives identical ears:", np.array_equal(c[0], c[1]))
