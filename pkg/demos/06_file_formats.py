"""Checkpoints, teacher posterior files and feature dumps, including what corruption looks like."""
import tempfile
from pathlib import Path

import numpy as np

from soundnet import network as N
from soundnet.formats import (
    Checkpoint,
    ChecksumError,
    FeatureDump,
    PosteriorError,
    TeacherPosterior,
    load_checkpoint,
    load_features,
    read_posteriors,
    save_checkpoint,
    save_features,
    write_posteriors,
)
from soundnet.synth import random_posteriors

tmp = Path(tempfile.mkdtemp())
net = N.build_soundnet8()
ckpt = Checkpoint.from_params(net, N.init_params(net, seed=7), iteration=1000, loss=2.5)
save_checkpoint(tmp / "model.sndc", ckpt)
back = load_checkpoint(tmp / "model.sndc")
print(f"checkpoint: {(tmp / 'model.sndc').stat().st_size:,} bytes, network {back.network_id}, "
      f"iteration {back.iteration}, seed {back.seed}, {back.parameter_count():,} parameters")

data = bytearray((tmp / "model.sndc").read_bytes())
data[1000] ^= 0xFF
try:
    Checkpoint.from_bytes(bytes(data))
except ChecksumError as exc:
    print("flipped byte:", exc)

rng = np.random.default_rng(0)
write_posteriors(tmp / "teacher.sntp", [TeacherPosterior("clip0", random_posteriors(rng, 3))])
print("posterior file holds", [(c.clip_id, c.probs.shape) for c in read_posteriors(tmp / "teacher.sntp")])
bad = random_posteriors(rng, 1) * 1.01
try:
    write_posteriors(tmp / "bad.sntp", [TeacherPosterior("clip1", bad)])
except PosteriorError as exc:
    print("unnormalised teacher:", exc)

dump = FeatureDump("pool5", 4)
dump.add("rain.wav#0", np.arange(4))
dump.add("rain.wav#1", np.ones(4))
save_features(tmp / "features.snfd", dump)
print("feature dump ids:", load_features(tmp / "features.snfd").ids)
