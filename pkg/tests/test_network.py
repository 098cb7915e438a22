import numpy as np
import pytest

from soundnet.network import (
    CONV,
    MAXPOOL,
    SOUNDNET8_MIN_LENGTH,
    SOUNDNET5_MIN_LENGTH,
    HeadSplit,
    LayerSpec,
    NetworkConfig,
    Parameters,
    backward,
    build_autoencoder4,
    build_soundnet5,
    build_soundnet8,
    build_soundnet8_compact,
    forward,
    init_params,
    is_round_trip_length,
    round_trip_length,
    split_heads,
)
from soundnet.tensor import InputTooShortError, ShapeError

from conftest import numeric_grad, rel_error

# Table rows typed in independently: (name, filters, kernel, stride, padding)
TABLE1_CONVS = [
    ("conv1", 16, 64, 2, 32), ("conv2", 32, 32, 2, 16), ("conv3", 64, 16, 2, 8), ("conv4", 128, 8, 2, 4),
    ("conv5", 256, 4, 2, 2), ("conv6", 512, 4, 2, 2), ("conv7", 1024, 4, 2, 2), ("conv8", 1401, 8, 2, 0),
]
TABLE1_POOLS = [("pool1", 8), ("pool2", 8), ("pool5", 4)]
TABLE2_CONVS = [
    ("conv1", 32, 64, 2, 32), ("conv2", 64, 32, 2, 16), ("conv3", 128, 16, 2, 8), ("conv4", 256, 8, 2, 4),
    ("conv5", 1401, 16, 12, 4),
]
TABLE2_POOLS = [("pool1", 8), ("pool2", 8), ("pool3", 8)]


def by_name(config):
    return {l.name: l for l in config.layers}


def lengths_oracle(length):
    """Per-block lengths for SoundNet-8 written out by hand from the shape law."""
    out = {}
    conv = lambda L, k, s, p: (L + 2 * p - k) // s + 1
    pool = lambda L, k: (L - k) // k + 1
    L = conv(length, 64, 2, 32); out["conv1"] = L
    L = pool(L, 8); out["pool1"] = L
    L = conv(L, 32, 2, 16); out["conv2"] = L
    L = pool(L, 8); out["pool2"] = L
    L = conv(L, 16, 2, 8); out["conv3"] = L
    L = conv(L, 8, 2, 4); out["conv4"] = L
    L = conv(L, 4, 2, 2); out["conv5"] = L
    L = pool(L, 4); out["pool5"] = L
    L = conv(L, 4, 2, 2); out["conv6"] = L
    L = conv(L, 4, 2, 2); out["conv7"] = L
    L = conv(L, 8, 2, 0); out["conv8"] = L
    return out


class TestSoundNet8:
    def test_table_geometry(self):
        layers = by_name(build_soundnet8())
        for name, filters, k, s, p in TABLE1_CONVS:
            l = layers[name]
            assert (l.kind, l.out_channels, l.kernel_size, l.stride, l.padding) == (CONV, filters, k, s, p)
        for name, size in TABLE1_POOLS:
            assert (layers[name].kind, layers[name].kernel_size, layers[name].stride) == (MAXPOOL, size, size)

    def test_layer_counts(self):
        c = build_soundnet8()
        assert sum(l.kind == CONV for l in c.layers) == 8
        assert sum(l.kind == MAXPOOL for l in c.layers) == 3

    def test_output_channels(self):
        assert build_soundnet8().out_channels == 1401 == 1000 + 401

    def test_norm_after_every_conv_but_last(self):
        layers = build_soundnet8().layers
        for i, l in enumerate(layers):
            if l.kind == CONV and l.name != "conv8":
                assert layers[i + 1].name == f"{l.name}/bn" and layers[i + 2].name == f"{l.name}/relu"
        assert layers[-1].name == "conv8"

    def test_lengths_for_table_input(self):
        got = build_soundnet8().output_lengths(220_050)
        for name, n in lengths_oracle(220_050).items():
            assert got[name] == n

    def test_min_length_probe(self):
        c = build_soundnet8()
        L = SOUNDNET8_MIN_LENGTH
        assert lengths_oracle(L)["conv8"] == 1
        assert lengths_oracle(L - 1)["conv8"] < 1
        assert c.min_input_length() == L

    def test_monotone_lengths(self):
        c = build_soundnet8()
        for L in (SOUNDNET8_MIN_LENGTH, 220_050, 300_001):
            a, b = c.output_lengths(L), c.output_lengths(2 * L)
            assert all(b[k] >= a[k] for k in a)


class TestSoundNet5:
    def test_table_geometry(self):
        layers = by_name(build_soundnet5())
        for name, filters, k, s, p in TABLE2_CONVS:
            l = layers[name]
            assert (l.out_channels, l.kernel_size, l.stride, l.padding) == (filters, k, s, p)
        for name, size in TABLE2_POOLS:
            assert (layers[name].kernel_size, layers[name].stride) == (size, 8)

    def test_final_layer(self):
        c = build_soundnet5()
        assert c.layers[-1].name == "conv5" and c.out_channels == 1401

    def test_min_length(self):
        c = build_soundnet5()
        assert c.output_lengths(SOUNDNET5_MIN_LENGTH)["conv5"] == 1
        assert c.output_lengths(SOUNDNET5_MIN_LENGTH - 1)["conv5"] < 1


class TestAutoencoder:
    def test_structure(self):
        c = build_autoencoder4()
        kinds = [l.kind for l in c.layers if l.kind in ("conv", "transposed_conv")]
        assert kinds == ["conv"] * 4 + ["transposed_conv"] * 4
        conv1 = by_name(c)["conv1"]
        assert (conv1.kernel_size, conv1.stride, conv1.padding) == (64, 2, 32)
        assert c.out_channels == 1

    def test_round_trip_length(self):
        c = build_autoencoder4()
        L = round_trip_length(c, 22_050)
        assert L == 22_016
        assert c.output_lengths(L)["deconv1"] == L
        assert not is_round_trip_length(c, 22_050)

    def test_forward_round_trip(self, rng):
        c = build_autoencoder4((2, 2, 2, 2))
        L = round_trip_length(c, 5000)
        out = forward(c, init_params(c, 0), rng.normal(size=(2, 1, L)), "train").output
        assert out.shape == (2, 1, L)


class TestInit:
    def test_deterministic(self):
        c = build_soundnet5()
        a, b = init_params(c, 7), init_params(c, 7)
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
        assert not np.array_equal(init_params(c, 8).arrays["conv1.weight"], a.arrays["conv1.weight"])

    def test_statistics(self):
        p = init_params(build_soundnet8(), 0)
        w1 = p.arrays["conv1.weight"].astype(np.float64).ravel()
        assert abs(w1.mean()) <= 3 * 0.01 / np.sqrt(w1.size)
        w2 = p.arrays["conv2.weight"].astype(np.float64).ravel()
        assert w2.size >= 10_000
        assert abs(w2.std() - 0.01) <= 0.05 * 0.01

    def test_biases_and_norm(self):
        p = init_params(build_soundnet8(), 0)
        for k, v in p.arrays.items():
            if k.endswith((".bias", ".beta")):
                assert not v.any()
            if k.endswith(".gamma"):
                assert np.all(v == 1)
        assert p.stats == {}


class TestForward:
    def test_table_input_through_soundnet8(self):
        c = build_soundnet8()
        x = np.random.default_rng(0).uniform(-256, 256, size=(1, 1, 220_050)).astype(np.float32)
        res = forward(c, init_params(c, 0), x, "train")
        assert res.output.shape == (1, 1401, lengths_oracle(220_050)["conv8"])
        for tap, act in res.activations.items():
            assert act.shape[2] == lengths_oracle(220_050)[tap]
            assert np.isfinite(act).all()
        assert set(res.stats) == {f"conv{i}/bn.running_{s}" for i in range(1, 8) for s in ("mean", "var")}

    def test_too_short_names_minimum(self):
        c = build_soundnet8_compact()
        with pytest.raises(InputTooShortError) as exc:
            forward(c, init_params(c, 0), np.zeros((1, 1, c.min_input_length() - 1)), "train")
        assert exc.value.min_length == c.min_input_length()
        assert str(c.min_input_length()) in str(exc.value)

    def test_min_length_probe_runs(self):
        c = build_soundnet8_compact(8)
        p = init_params(c, 0)
        L = c.min_input_length()
        assert forward(c, p, np.ones((2, 1, L)), "train").output.shape[2] >= 1

    def test_nonfinite_rejected(self):
        c = build_soundnet8_compact(8)
        x = np.zeros((1, 1, 30_000))
        x[0, 0, 5] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            forward(c, init_params(c, 0), x, "train")

    def test_eval_is_pure(self, rng):
        c = build_soundnet8_compact(8)
        p = init_params(c, 0)
        x = rng.normal(size=(2, 1, 22_050)).astype(np.float32)
        p = p.with_stats(forward(c, p, x, "train").stats)
        a = forward(c, p, x, "eval").output
        b = forward(c, p, x, "eval").output
        assert np.array_equal(a, b)

    def test_stop_at_tap(self):
        c = build_soundnet8_compact(8)
        res = forward(c, init_params(c, 0), np.ones((2, 1, 22_050)), "train", stop_at="pool5")
        assert set(res.activations) == {"conv1", "pool1", "conv2", "pool2", "conv3", "conv4", "conv5", "pool5"}
        assert res.output is res.activations["pool5"]

    def test_tap_is_post_relu(self, rng):
        c = build_soundnet8_compact(8)
        res = forward(c, init_params(c, 0), rng.normal(size=(2, 1, 22_050)), "train")
        assert res.activations["conv3"].min() >= 0

    def test_unknown_tap(self):
        with pytest.raises(KeyError, match="valid taps"):
            build_soundnet8().resolve_tap("fc7")


class TestConfig:
    def test_chain_validation(self):
        with pytest.raises(ValueError, match="channels"):
            NetworkConfig("bad", (LayerSpec("a", CONV, 1, 4, 3), LayerSpec("b", CONV, 5, 2, 3)))

    def test_duplicate_names(self):
        with pytest.raises(ValueError, match="duplicate"):
            NetworkConfig("bad", (LayerSpec("a", CONV, 1, 4, 3), LayerSpec("a", CONV, 4, 2, 3)))

    def test_describe_round_trip(self):
        for c in (build_soundnet8(), build_autoencoder4(), build_soundnet8_compact(2)):
            assert NetworkConfig.from_description(c.describe()) == c


class TestHeads:
    def test_boundaries(self):
        out = np.zeros((1, 1401, 3))
        out[0, 0] = 1
        out[0, 1000] = 2
        obj, scene = split_heads(out)
        assert obj.shape == (1, 1000, 3) and scene.shape == (1, 401, 3)
        assert np.all(obj[0, 0] == 1) and np.all(scene[0, 0] == 2)

    def test_concat(self, rng):
        out = rng.normal(size=(2, 1401, 4))
        assert np.array_equal(np.concatenate(split_heads(out), axis=1), out)

    def test_split_ranges(self):
        s = HeadSplit()
        assert s.total == 1401
        assert set(s.object_range).isdisjoint(s.scene_range)
        assert len(s.object_range) + len(s.scene_range) == 1401

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            split_heads(np.zeros((1, 1400, 2)))


def test_network_backward_finite_differences(rng):
    layers = (
        LayerSpec("conv1", CONV, 1, 3, 4, 2, 1), LayerSpec("conv1/bn", "batchnorm", 3, 3), LayerSpec("conv1/relu", "relu", 3, 3),
        LayerSpec("pool1", MAXPOOL, kernel_size=2, stride=2),
        LayerSpec("conv2", CONV, 3, 2, 3, 1, 1),
    )
    c = NetworkConfig("toy", layers, ("conv1", "pool1", "conv2"))
    p = init_params(c, 3, std=1.0, dtype=np.float64)
    x = rng.normal(size=(2, 1, 20))
    proj = rng.normal(size=forward(c, p, x, "train").output.shape)

    def loss():
        return float((forward(c, p, x, "train").output * proj).sum())

    res = forward(c, p, x, "train", keep_cache=True)
    grads = backward(c, p, res, proj)
    for key, arr in p.arrays.items():
        assert rel_error(grads[key], numeric_grad(loss, arr, h=1e-4)) < 1e-4, key
