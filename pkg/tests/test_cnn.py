import numpy as np
import pytest

from oracles import conv2d_naive, maxpool_naive

from irisrec import cnn
from irisrec.container import BadMagicError
from irisrec.dataset import ImageTensor
from irisrec.fixtures import random_weights, tiny_network_spec


def _rel_err(got, want):
    scale = max(np.abs(want).max(), 1e-30)
    return np.abs(got - want).max() / scale


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 5, 1)).astype(np.float32)
        kernel = np.zeros((1, 1, 3, 3), dtype=np.float32)
        kernel[0, 0, 1, 1] = 1.0
        out = cnn.conv2d(x, kernel, np.zeros(1, dtype=np.float32))
        assert np.array_equal(out, x)

    def test_spatial_dims_preserved_at_network_scale(self):
        x = np.zeros((224, 224, 1), dtype=np.float32)
        kernel = np.zeros((1, 1, 3, 3), dtype=np.float32)
        out = cnn.conv2d(x, kernel, np.zeros(1, dtype=np.float32))
        assert out.shape == (224, 224, 1)

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 5, 2))
        kernel = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        got = cnn.conv2d(x, kernel, bias)
        want = conv2d_naive(x, kernel, bias)
        assert _rel_err(got, want) < 1e-5

    def test_oracle_sweep(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            h, w = rng.integers(1, 9, size=2)
            c_in, c_out = rng.integers(1, 5, size=2)
            x = rng.normal(size=(h, w, c_in))
            kernel = rng.normal(size=(c_out, c_in, 3, 3))
            bias = rng.normal(size=c_out)
            assert _rel_err(cnn.conv2d(x, kernel, bias), conv2d_naive(x, kernel, bias)) < 1e-5

    def test_linearity(self):
        rng = np.random.default_rng(3)
        kernel = rng.normal(size=(2, 3, 3, 3))
        zero_bias = np.zeros(2)
        for _ in range(10):
            x, y = rng.normal(size=(2, 6, 7, 3))
            a, b = rng.normal(size=2)
            combined = cnn.conv2d(a * x + b * y, kernel, zero_bias)
            separate = a * cnn.conv2d(x, kernel, zero_bias) + b * cnn.conv2d(y, kernel, zero_bias)
            assert _rel_err(combined, separate) < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(cnn.ChannelMismatchError):
            cnn.conv2d(np.zeros((4, 4, 2)), np.zeros((1, 3, 3, 3)), np.zeros(1))


class TestRelu:
    def test_all_negative(self):
        assert np.array_equal(cnn.relu(np.full((2, 2, 1), -3.0)), np.zeros((2, 2, 1)))

    def test_nonnegative_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(cnn.relu(x), x)

    def test_mixed(self):
        assert cnn.relu(np.array([-1.5, 0.0, 2.25])).tolist() == [0.0, 0.0, 2.25]


class TestMaxpool:
    def test_constant(self):
        out = cnn.maxpool2d(np.full((4, 4, 1), 9.0))
        assert np.array_equal(out, np.full((2, 2, 1), 9.0))

    def test_halves_dims(self):
        assert cnn.maxpool2d(np.zeros((224, 224, 3))).shape == (112, 112, 3)

    def test_matches_naive_exactly(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 6, 3)).astype(np.float32)
        assert np.array_equal(cnn.maxpool2d(x), maxpool_naive(x))

    def test_odd_dims_rejected(self):
        with pytest.raises(cnn.OddSpatialDimError):
            cnn.maxpool2d(np.zeros((5, 4, 1)))


class TestFullyConnected:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        out = cnn.fully_connected(x, np.eye(3, dtype=np.float32), np.zeros(3, dtype=np.float32))
        assert np.array_equal(out, x)

    def test_hand_case(self):
        out = cnn.fully_connected(
            np.array([1.0, 2.0]),
            np.array([[1.0, 1.0], [0.0, 3.0]]),
            np.array([0.5, -1.0]),
        )
        assert out.tolist() == [3.5, 5.0]

    def test_dim_mismatch(self):
        with pytest.raises(cnn.DimMismatchError):
            cnn.fully_connected(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


class TestSpatialAverage:
    def test_constant_channel(self):
        act = cnn.Activation("c", np.full((4, 5, 1), 3.5))
        assert cnn.spatial_average(act).values.tolist() == [3.5]

    def test_hand_mean(self):
        act = cnn.Activation("c", np.array([[1.0, 2.0], [3.0, 6.0]])[:, :, None])
        assert cnn.spatial_average(act).values.tolist() == [3.0]

    def test_channel_count_to_dim(self):
        act = cnn.Activation("conv", np.zeros((3, 3, 512)))
        fv = cnn.spatial_average(act)
        assert fv.dim == 512 and fv.source_layer == "conv"

    def test_flat_passthrough(self):
        act = cnn.Activation("fc6", np.arange(7.0))
        assert np.array_equal(cnn.spatial_average(act).values, np.arange(7.0))

    def test_channel_permutation_commutes(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(4, 4, 6))
        perm = rng.permutation(6)
        direct = cnn.spatial_average(cnn.Activation("a", data)).values
        permuted = cnn.spatial_average(cnn.Activation("a", data[:, :, perm])).values
        assert np.array_equal(permuted, direct[perm])

    def test_not_spatial(self):
        with pytest.raises(cnn.NotSpatialError):
            cnn.spatial_average(cnn.Activation("x", np.zeros((3, 3))))


class TestNetworkSpec:
    def test_vgg16_shape_propagation(self):
        spec = cnn.vgg16()
        shapes = spec.shapes()
        assert shapes["pool1"] == (112, 112, 64)
        assert shapes["pool2"] == (56, 56, 128)
        assert shapes["pool3"] == (28, 28, 256)
        assert shapes["pool4"] == (14, 14, 512)
        assert shapes["pool5"] == (7, 7, 512)
        assert shapes["flatten"] == (25088,)
        assert shapes["fc6"] == (4096,)

    def test_vgg16_parameter_count(self):
        # Published total for the 16-layer configuration ("around 138M").
        assert cnn.parameter_count(cnn.vgg16()) == 138_357_544

    def test_fc6_dominates(self):
        shapes = cnn.expected_weight_shapes(cnn.vgg16())
        fc6_params = int(np.prod(shapes["fc6"][0]))
        assert fc6_params == 25088 * 4096  # ~102M, most of the network

    def test_duplicate_names_rejected(self):
        with pytest.raises(cnn.NetworkSpecError):
            cnn.NetworkSpec(
                layers=(cnn.LayerSpec("a", "relu"), cnn.LayerSpec("a", "relu")),
                input_shape=(4, 4, 1),
            )

    def test_fc_requires_flatten(self):
        with pytest.raises(cnn.NetworkSpecError):
            cnn.NetworkSpec(
                layers=(cnn.LayerSpec("fc", "fc", out_features=2),), input_shape=(4, 4, 1)
            )

    def test_odd_pool_dims_rejected(self):
        with pytest.raises(cnn.NetworkSpecError):
            cnn.NetworkSpec(
                layers=(cnn.LayerSpec("p", "maxpool"),), input_shape=(5, 4, 1)
            )

    def test_json_roundtrip(self):
        spec = tiny_network_spec()
        doc = cnn.network_spec_to_json(spec)
        assert cnn.network_spec_from_json(doc) == spec


class TestWeightIO:
    def test_single_conv_file(self, tmp_path):
        spec = cnn.NetworkSpec(
            layers=(cnn.LayerSpec("conv1", "conv", out_channels=2),), input_shape=(4, 4, 3)
        )
        assert cnn.parameter_count(spec) == 56  # (2,3,3,3) kernel + 2 biases
        store = random_weights(spec, seed=11)
        path = tmp_path / "w.vggw"
        cnn.save_weights(path, spec, store)
        loaded = cnn.load_weights(path, spec)
        assert np.array_equal(loaded.weight("conv1"), store.weight("conv1"))
        assert np.array_equal(loaded.bias("conv1"), store.bias("conv1"))

    def test_roundtrip_bitwise(self, tmp_path):
        spec = tiny_network_spec()
        store = random_weights(spec, seed=12)
        path = tmp_path / "w.vggw"
        cnn.save_weights(path, spec, store)
        loaded = cnn.load_weights(path, spec)
        for name in store.tensors:
            assert np.array_equal(
                loaded.weight(name).view(np.uint32), store.weight(name).view(np.uint32)
            )
            assert np.array_equal(
                loaded.bias(name).view(np.uint32), store.bias(name).view(np.uint32)
            )

    def test_wrong_bias_shape(self, tmp_path):
        spec = cnn.NetworkSpec(
            layers=(cnn.LayerSpec("conv1", "conv", out_channels=2),), input_shape=(4, 4, 3)
        )
        from irisrec.container import write_tensors

        path = tmp_path / "w.vggw"
        write_tensors(
            path,
            b"VGGW",
            [
                ("conv1.weight", np.zeros((2, 3, 3, 3), np.float32)),
                ("conv1.bias", np.zeros(3, np.float32)),
            ],
        )
        with pytest.raises(cnn.ShapeMismatchError):
            cnn.load_weights(path, spec)

    def test_missing_layer(self, tmp_path):
        spec = tiny_network_spec()
        store = random_weights(spec, seed=13)
        del store.tensors["fc1"]
        path = tmp_path / "w.vggw"
        cnn.save_weights(path, spec, store)
        with pytest.raises(cnn.MissingLayerError):
            cnn.load_weights(path, spec)

    def test_unexpected_tensor(self, tmp_path):
        spec = cnn.NetworkSpec(
            layers=(cnn.LayerSpec("conv1", "conv", out_channels=2),), input_shape=(4, 4, 3)
        )
        from irisrec.container import write_tensors

        path = tmp_path / "w.vggw"
        write_tensors(
            path,
            b"VGGW",
            [
                ("conv1.weight", np.zeros((2, 3, 3, 3), np.float32)),
                ("conv1.bias", np.zeros(2, np.float32)),
                ("ghost.weight", np.zeros(1, np.float32)),
            ],
        )
        with pytest.raises(cnn.UnexpectedTensorError):
            cnn.load_weights(path, spec)

    def test_bad_magic_propagates(self, tmp_path):
        path = tmp_path / "w.vggw"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(BadMagicError):
            cnn.load_weights(path, tiny_network_spec())


def _image(shape, seed=0):
    rng = np.random.default_rng(seed)
    return ImageTensor(rng.uniform(-1, 1, size=shape).astype(np.float32))


class TestForward:
    def test_composition_matches_manual(self):
        spec = tiny_network_spec()
        weights = random_weights(spec, seed=14)
        img = _image((8, 8, 3), seed=20)
        taps = cnn.forward(spec, weights, img, {"conv2", "pool2", "fc1"})

        h1 = cnn.relu(cnn.conv2d(img.data, weights.weight("conv1"), weights.bias("conv1")))
        p1 = cnn.maxpool2d(h1)
        h2 = cnn.relu(cnn.conv2d(p1, weights.weight("conv2"), weights.bias("conv2")))
        p2 = cnn.maxpool2d(h2)
        fc = cnn.fully_connected(p2.reshape(-1), weights.weight("fc1"), weights.bias("fc1"))

        assert np.array_equal(taps["conv2"].data, h2)  # conv tap is post-relu
        assert np.array_equal(taps["pool2"].data, p2)
        assert np.array_equal(taps["fc1"].data, fc)

    def test_pre_relu_flag(self):
        spec = tiny_network_spec()
        weights = random_weights(spec, seed=15)
        img = _image((8, 8, 3), seed=21)
        raw = cnn.conv2d(img.data, weights.weight("conv1"), weights.bias("conv1"))
        tap = cnn.forward(spec, weights, img, {"conv1"}, pre_relu=True)["conv1"]
        assert np.array_equal(tap.data, raw)
        assert (raw < 0).any()  # the flag actually changes something

    def test_empty_taps_do_no_work(self):
        spec = tiny_network_spec()
        assert cnn.forward(spec, cnn.WeightStore({}), _image((8, 8, 3)), set()) == {}

    def test_tap_skipping_changes_nothing(self):
        spec = tiny_network_spec()
        weights = random_weights(spec, seed=16)
        img = _image((8, 8, 3), seed=22)
        only_first = cnn.forward(spec, weights, img, {"conv1"})
        everything = cnn.forward(spec, weights, img, {l.name for l in spec.layers})
        assert np.array_equal(only_first["conv1"].data, everything["conv1"].data)

    def test_unknown_tap(self):
        spec = tiny_network_spec()
        with pytest.raises(cnn.UnknownTapError):
            cnn.forward(spec, cnn.WeightStore({}), _image((8, 8, 3)), {"nope"})

    def test_input_shape_checked(self):
        spec = tiny_network_spec()
        with pytest.raises(cnn.ShapeMismatchError):
            cnn.forward(spec, cnn.WeightStore({}), _image((4, 4, 3)), {"conv1"})
