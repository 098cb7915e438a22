"""Convolution, pooling, batch norm and the KL head on tiny hand-sized arrays."""
import numpy as np

from soundnet.tensor import (
    BatchNormParams,
    ConvParams,
    batchnorm_forward,
    conv1d_forward,
    kl_divergence,
    kl_softmax_gradient,
    maxpool1d_forward,
    softmax,
    transposed_conv1d_forward,
)

# arrays are (batch, channels, length)
x = np.array([[[1.0, 2.0, 3.0, 4.0]]])

# a width-2 kernel of ones with stride 2 sums neighbouring pairs
pairs = ConvParams(np.ones((1, 1, 2)), np.zeros(1), stride=2)
print("conv [1,2,3,4] with [1,1], stride 2:", conv1d_forward(x, pairs)[0, 0])

# the transposed op spreads each value back over the kernel footprint
print("transposed back:", transposed_conv1d_forward(np.array([[[3.0, 7.0]]]), pairs)[0, 0])

# max pooling returns the winners' positions for the backward pass
out, argmax = maxpool1d_forward(np.array([[[1.0, 5.0, 5.0, 2.0, 0.0, 9.0]]]), 3)
print("maxpool size 3:", out[0, 0], "winners at", argmax[0, 0], "(ties go left)")

# train-mode batch norm normalises each channel over batch and time
rng = np.random.default_rng(0)
batch = rng.normal(loc=5.0, scale=3.0, size=(4, 2, 10))
normed, params, _ = batchnorm_forward(batch, BatchNormParams(np.ones(2), np.zeros(2)), "train")
print("after batch norm, channel means:", normed.mean(axis=(0, 2)).round(6), "stds:", normed.std(axis=(0, 2)).round(4))
print("running mean seeded from the first batch:", params.running_mean.round(3))

# KL from a teacher distribution to the student's softmax, and its gradient
teacher = np.array([0.7, 0.2, 0.1])
logits = np.array([0.5, 0.0, -0.5])
print("KL(teacher || softmax(logits)) =", round(kl_divergence(teacher, softmax(logits)), 5))
print("gradient w.r.t. logits:", kl_softmax_gradient(teacher, logits).round(5), "(sums to zero)")
