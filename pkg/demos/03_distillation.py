"""Distil fixed random teacher posteriors into the compact student and watch the loss fall."""
import numpy as np

from soundnet import network as N
from soundnet.synth import overfit_clips, random_posteriors
from soundnet.training import DistillSample, TrainConfig, train_distill

net = N.build_soundnet8_compact()
rng = np.random.default_rng(0)
clips = overfit_clips(rng)
steps = net.output_lengths(22_050)["conv8"]
samples = [DistillSample(c, random_posteriors(rng, steps), f"clip{i}") for i, c in enumerate(clips)]


def report(it, loss):
    if it in (1, 10, 25, 50, 100):
        print(f"iteration {it:4d}  loss {loss:.4f}")


for objective in ("kl", "l2"):
    print(f"--- {objective} objective")
    result = train_distill(samples, net, TrainConfig(batch_size=8, max_iterations=100), loss=objective, callback=report)
    print(f"fell by {1 - result.losses[-1] / result.losses[0]:.1%}")
