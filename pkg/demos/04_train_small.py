"""
Training a small model against the zero-mask baseline
=====================================================

Generates a miniature dataset, trains a reduced-width model for a few hundred
steps, and compares it with the mono-split baseline. The full-size run used
for acceptance is the same code with the default configuration:

    binauralnet gen-data --out data --num-train 1000 --num-val 50 --num-test 200 --seed 7 --set gen.max_sources=2
    binauralnet train --data data --out run --steps 10000
    binauralnet eval --ckpt run/model.ckpt --data data --report run/report.json
"""

import tempfile
from pathlib import Path

from binauralnet.audionet import ModelConfig
from binauralnet.data import SceneData
from binauralnet.evaluation import baseline_zero_mask, evaluate
from binauralnet.scenegen import GenConfig, make_dataset
from binauralnet.signal import StftParams
from binauralnet.training import TrainConfig, load_checkpoint, train
from binauralnet.vision import TowerConfig

# 64-sample window, 32x32 frames with a 2x2 patch grid, narrow UNet
stft = StftParams(window_len=64, hop=32, fft_size=64)
tower = TowerConfig(image_size=(32, 32), token_dim=16, num_heads=2, tap_dim=4)
model_cfg = ModelConfig(stft=stft, encoder_widths=(8, 8, 16, 16, 16), tower=tower)
gen = GenConfig(image_size=(32, 32), duration=0.3, max_sources=2)

work = Path(tempfile.mkdtemp(prefix="binauralnet_demo_"))
make_dataset(gen, work / "data", counts=(200, 16, 50), seed=7)
test = SceneData(work / "data", "test", stft)

base = baseline_zero_mask(test)
print("zero-mask baseline: STFT %.3f  ENV %.4f" % (base.stft, base.env))

cfg = TrainConfig(steps=400, batch_size=16, lr=1e-3, val_interval=100, checkpoint_interval=400)
ckpt = train(cfg, work / "data", work / "run", model_cfg,
             on_step=lambda step, loss: step % 100 == 0 and print(f"step {step:4d}  loss {loss:.3f}"))

model = load_checkpoint(ckpt).build_model()
rep = evaluate(model, test)
print("trained model:      STFT %.3f  ENV %.4f" % (rep.stft, rep.env))
print("ratios to baseline: STFT %.3f  ENV %.3f" % (rep.stft / base.stft, rep.env / base.env))
print("artifacts in", work)
