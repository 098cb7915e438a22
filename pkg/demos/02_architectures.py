"""The two student networks, their shape arithmetic, and the autoencoder baseline."""
import numpy as np

from soundnet import network as N

net8 = N.build_soundnet8()
print(f"{net8.name}: {N.init_params(net8, 0).count():,} parameters")
print("per-layer lengths for a 220,050-sample (about 10 s) input:")
for name, length in net8.output_lengths(220_050).items():
    if "/" not in name:
        print(f"  {name:6s} {length}")

# a fully convolutional net has a shortest input it can process
print("shortest input for soundnet8:", N.SOUNDNET8_MIN_LENGTH, "samples")
print("shortest input for soundnet5:", N.SOUNDNET5_MIN_LENGTH, "samples")

# one-second clips need the compact variant, which keeps the early geometry
compact = N.build_soundnet8_compact()
print(f"{compact.name}: shortest input {compact.min_input_length()}, "
      f"{compact.output_lengths(22_050)['conv8']} output steps per second of audio")

# the output splits into an object head and a scene head
x = np.random.default_rng(0).uniform(-256, 256, size=(1, 1, 22_050)).astype(np.float32)
params = N.init_params(compact, 0)
res = N.forward(compact, params, x, "train")
objects, scenes = N.split_heads(res.output)
print("object logits", objects.shape, "scene logits", scenes.shape)
print("taps available for features:", ", ".join(compact.taps))

ae = N.build_autoencoder4()
L = N.round_trip_length(ae, 22_050)
print(f"autoencoder reproduces inputs of {L} samples exactly; output shape",
      N.forward(ae, N.init_params(ae, 0), x[:, :, :L], "train").output.shape)
