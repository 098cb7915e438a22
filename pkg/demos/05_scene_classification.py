"""The full pipeline on a toy problem: distil, extract pool5 features, fit an SVM, classify recordings."""
import numpy as np

from soundnet import network as N
from soundnet.audio import TARGET_RATE, Waveform, extract_windows
from soundnet.features import classify_recording, extract_features, svm_train
from soundnet.synth import CLASSES, make_dataset, rule_teacher
from soundnet.training import DistillSample, TrainConfig, train_distill

clips, labels = make_dataset(per_class=10, seconds=2.0, seed=1)
train = [i for i in range(len(clips)) if i % 5 < 3]
test = [i for i in range(len(clips)) if i % 5 >= 3]

# the fake teacher peaks on a different class for each signal family
net = N.build_soundnet8_compact()
steps = net.output_lengths(TARGET_RATE)["conv8"]
samples = [
    DistillSample(w, rule_teacher(labels[i], steps))
    for i in train
    for w in extract_windows(Waveform(clips[i], TARGET_RATE, 256), 1.0)
]
params = train_distill(samples, net, TrainConfig(batch_size=8, max_iterations=100)).params

# one feature vector per 1 s window; windows of a recording stay in one fold
feats, y, groups = [], [], []
for i in train:
    f = extract_features(net, params, "pool5", np.stack(extract_windows(Waveform(clips[i], TARGET_RATE, 256), 1.0)))
    feats.append(f)
    y += [labels[i]] * len(f)
    groups += [i] * len(f)
model = svm_train(np.vstack(feats), y, groups=groups)
print(f"{len(y)} training windows of dimension {feats[0].shape[1]}; chose C={model.C:g}")

# recordings are labelled by averaging window scores
hits = {c: [0, 0] for c in CLASSES}
for i in test:
    label, _ = classify_recording(model, net, params, "pool5", Waveform(clips[i], TARGET_RATE, 256), 1.0)
    hits[labels[i]][0] += label == labels[i]
    hits[labels[i]][1] += 1
for c, (ok, n) in hits.items():
    print(f"{c:6s} {ok}/{n}")
