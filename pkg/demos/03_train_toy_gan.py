"""Train the in-painting GAN at toy scale and use it for an injection.

A full toy run is 200 iterations (a few minutes on one core); pass a smaller
count as the first argument for a quick look.

Run: python3 demos/03_train_toy_gan.py [iterations]
"""
import sys

import numpy as np

from ctgan_sim.gan.training import TrainConfig, Trainer, reconstruction_error
from ctgan_sim.phantom import generate_dataset, random_phantom
from ctgan_sim.pipeline.oracle import GanInpainter
from ctgan_sim.pipeline.tamper import TamperConfig, inject

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cubes = np.stack([s.cube for s in generate_dataset(16, (10, 16), seed=0)]).astype(np.float32)
cfg = TrainConfig.toy(seed=0, iterations=iterations)
print("channel widths:", cfg.arch().widths())

trainer = Trainer(cubes, cfg)


def progress(i, tr):
    if i == 0 or (i + 1) % 25 == 0:
        print(f"  iteration {i + 1:4d}  masked L1 {reconstruction_error(tr.generator, cubes):.4f}")


trainer.run(callback=progress)

scan, _ = random_phantom(99, n_nodules=0)
# a weak generator may not grow a detectable nodule, so skip the success check
out, record = inject(scan, GanInpainter(trainer.generator), TamperConfig(max_injections=2, success_diameter_mm=0, seed=1))
for a in record:
    core = tuple(slice(o + e // 4, o + 3 * e // 4) for o, e in zip(a.origin, a.extents))
    rise = out.voxels[core].mean() - scan.voxels[core].mean()
    print(f"site {tuple(a.center)}: mean HU rise in the in-painted core {rise:.0f}")
