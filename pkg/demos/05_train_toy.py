"""
Training Toy end to end
=======================

A short two-stage run on 60 synthetic samples at 16^3: first single
views through encoder and decoder, then random view counts with the
fusion network switched on.  Finishes in a couple of minutes on one core.
Scaled up (200 samples, 32^3, 12 epochs) the same recipe reaches an IoU
around 0.65 with one view.
"""

import time

from voxrecon.data import KINDS, synth_generate
from voxrecon.model import build_config, init_model
from voxrecon.training import TrainConfig, evaluate, run_training

samples = [synth_generate(KINDS[i % 5], 500 + i, 5, 32, 16, sample_id=f"d{i:03d}") for i in range(60)]
train, held = samples[:48], samples[48:]

cfg = build_config("Toy", 16, refiner=False)
params = init_model(cfg, seed=0)
conf = TrainConfig(batch_size=4, lr=2e-3, stage1_epochs=6, stage2_epochs=2, decay_epoch=4, seed=0)

t0 = time.perf_counter()
params = run_training(cfg, params, train, conf, val=held, log=print)
print(f"trained in {time.perf_counter() - t0:.0f}s")

# more views should help, and the learned fusion should not lose to the mean
print(evaluate(cfg, params, held, [1, 3, 5]).format())
print(evaluate(cfg, params, held, [3, 5], fusion="average").format())
