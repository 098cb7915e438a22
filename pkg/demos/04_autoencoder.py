"""Reconstruction training of the 4+4 convolutional autoencoder on pure tones."""
import numpy as np

from soundnet import network as N
from soundnet.synth import overfit_clips
from soundnet.training import TrainConfig, train_autoencoder

clips = overfit_clips(np.random.default_rng(0))
net = N.build_autoencoder4()
print("clips are cropped to", N.round_trip_length(net, len(clips[0])), "samples")


def report(it, loss):
    if it == 1 or it % 100 == 0:
        print(f"iteration {it:4d}  MSE {loss:9.1f}")


# a few hundred steps show the trend; the acceptance suite runs to an 80% drop
result = train_autoencoder(clips, TrainConfig(batch_size=8, max_iterations=300), callback=report)
print(f"MSE fell by {1 - result.losses[-1] / result.losses[0]:.1%} in {len(result.losses)} iterations")
