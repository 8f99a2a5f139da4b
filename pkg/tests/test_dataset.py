import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from irisrec.dataset import (
    CorruptImageError,
    DatasetIndex,
    EmptyDatasetError,
    ImageTensor,
    InsufficientSamplesError,
    MeanShapeMismatchError,
    SplitSpec,
    UnsupportedFormatError,
    index_dataset,
    load_image,
    resize_bilinear,
    split_dataset,
    to_network_input,
    write_pgm,
)


class TestImageTensor:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((4, 4, 2)))
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((0, 4, 1)))

    def test_immutability(self):
        img = ImageTensor(np.zeros((2, 2, 1)))
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 1.0


class TestPgm:
    def test_direct_byte_decode(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        img = load_image(path)
        assert (img.height, img.width, img.channels) == (2, 2, 1)
        assert img.data.ravel().tolist() == [0.0, 255.0, 128.0, 64.0]

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1 # dims\n255\n" + bytes([7, 9]))
        img = load_image(path)
        assert img.data.ravel().tolist() == [7.0, 9.0]

    def test_iit_style_dimensions(self, tmp_path):
        # Source imagery in that collection is 320x240.
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(240, 320, 1)).astype(np.float32)
        path = tmp_path / "iris.pgm"
        write_pgm(path, ImageTensor(pixels))
        img = load_image(path)
        assert (img.height, img.width) == (240, 320)
        assert np.array_equal(img.data, pixels)

    def test_writer_roundtrip_exact_bytes(self, tmp_path):
        payload = bytes(range(12))
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n4 3\n255\n" + payload)
        img = load_image(path)
        out = tmp_path / "b.pgm"
        write_pgm(out, img)
        assert out.read_bytes() == path.read_bytes()

    def test_payload_length_mismatch(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([1, 2, 3]))
        with pytest.raises(CorruptImageError):
            load_image(path)

    def test_unsupported_maxval(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n1 1\n99\n\x00")
        with pytest.raises(UnsupportedFormatError):
            load_image(path)


class TestPng:
    def test_single_rgb_pixel_from_stock_encoder(self, tmp_path):
        path = tmp_path / "p.png"
        Image.fromarray(np.array([[[10, 20, 30]]], dtype=np.uint8)).save(path)
        img = load_image(path)
        assert (img.height, img.width, img.channels) == (1, 1, 3)
        assert img.data.ravel().tolist() == [10.0, 20.0, 30.0]

    @pytest.mark.parametrize("channels", [1, 3])
    def test_random_image_matches_stock_encoder(self, tmp_path, channels):
        rng = np.random.default_rng(42)
        arr = rng.integers(0, 256, size=(37, 23, channels)).astype(np.uint8)
        path = tmp_path / "p.png"
        Image.fromarray(arr.squeeze() if channels == 1 else arr).save(path)
        img = load_image(path)
        assert img.channels == channels
        assert np.array_equal(img.data.astype(np.uint8), arr)

    def test_smooth_gradient_exercises_filters(self, tmp_path):
        # Gradients push PIL toward Sub/Up/Average/Paeth scanline filters.
        y, x = np.mgrid[0:64, 0:64]
        arr = ((y * 2 + x * 3) % 256).astype(np.uint8)
        path = tmp_path / "p.png"
        Image.fromarray(arr).save(path, optimize=True)
        img = load_image(path)
        assert np.array_equal(img.data[:, :, 0].astype(np.uint8), arr)

    def test_crc_corruption(self, tmp_path):
        path = tmp_path / "p.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(path)
        raw = bytearray(path.read_bytes())
        raw[-5] ^= 0xFF  # flip a bit inside IEND's CRC
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptImageError):
            load_image(path)

    def test_16bit_rejected(self, tmp_path):
        path = tmp_path / "p.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(path)
        with pytest.raises(UnsupportedFormatError):
            load_image(path)


def test_unknown_magic(tmp_path):
    path = tmp_path / "x.img"
    path.write_bytes(b"BM000000")
    with pytest.raises(UnsupportedFormatError):
        load_image(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.pgm")


class TestResize:
    def test_constant_stays_constant(self):
        img = ImageTensor(np.full((5, 9, 3), 77.0, dtype=np.float32))
        out = resize_bilinear(img, 13, 4)
        assert out.channels == 3
        assert np.array_equal(out.data, np.full((13, 4, 3), 77.0, dtype=np.float32))

    def test_network_input_dimensions(self):
        img = ImageTensor(np.zeros((240, 320, 1), dtype=np.float32))
        out = resize_bilinear(img, 224, 224)
        assert (out.height, out.width) == (224, 224)

    def test_hand_computed_grid(self):
        # src coords for 2 -> 4 under (d + 0.5) * 0.5 - 0.5, clamped:
        # [0, 0.25, 0.75, 1]; value = 100 * (t_row + t_col).
        img = ImageTensor(np.array([[0.0, 100.0], [100.0, 200.0]])[:, :, None])
        out = resize_bilinear(img, 4, 4)
        expected = np.array(
            [
                [0, 25, 75, 100],
                [25, 50, 100, 125],
                [75, 100, 150, 175],
                [100, 125, 175, 200],
            ],
            dtype=np.float32,
        )
        assert np.array_equal(out.data[:, :, 0], expected)

    def test_identity_is_exact(self):
        rng = np.random.default_rng(3)
        img = ImageTensor(rng.uniform(0, 255, size=(7, 11, 3)).astype(np.float32))
        out = resize_bilinear(img, 7, 11)
        assert np.array_equal(out.data, img.data)

    def test_range_bound(self):
        rng = np.random.default_rng(4)
        img = ImageTensor(rng.uniform(10, 20, size=(6, 6, 1)).astype(np.float32))
        out = resize_bilinear(img, 17, 3)
        assert out.data.min() >= img.data.min() - 1e-4
        assert out.data.max() <= img.data.max() + 1e-4


class TestNetworkInput:
    def test_gray_minus_own_mean_is_zero(self):
        img = ImageTensor(np.full((3, 3, 1), 100.0, dtype=np.float32))
        out = to_network_input(img, (100.0, 100.0, 100.0))
        assert out.channels == 3
        assert np.array_equal(out.data, np.zeros((3, 3, 3), dtype=np.float32))

    def test_zero_mean_is_identity(self):
        rng = np.random.default_rng(5)
        img = ImageTensor(rng.uniform(0, 255, size=(4, 4, 3)).astype(np.float32))
        out = to_network_input(img, (0.0, 0.0, 0.0))
        assert np.array_equal(out.data, img.data)

    def test_conventional_mean_subtraction(self):
        img = ImageTensor(np.full((2, 2, 1), 128.0, dtype=np.float32))
        out = to_network_input(img, (123.68, 116.779, 103.939))
        np.testing.assert_allclose(out.data[0, 0], [4.32, 11.221, 24.061], rtol=1e-5)

    def test_bad_mean_shape(self):
        img = ImageTensor(np.zeros((2, 2, 1), dtype=np.float32))
        with pytest.raises(MeanShapeMismatchError):
            to_network_input(img, (1.0, 2.0))


def _make_dataset(root, layout):
    for subject, names in layout.items():
        subject_dir = root / subject
        subject_dir.mkdir(parents=True)
        for name in names:
            write_pgm(subject_dir / name, ImageTensor(np.zeros((2, 2, 1), dtype=np.float32)))


class TestIndex:
    def test_enumeration(self, tmp_path):
        _make_dataset(tmp_path, {"s1": ["a.pgm", "b.pgm"], "s2": ["c.pgm"]})
        index = index_dataset(tmp_path)
        assert len(index) == 3
        assert index.subjects == ("s1", "s2")

    def test_entries_sorted(self, tmp_path):
        _make_dataset(tmp_path, {"s2": ["z.pgm", "a.pgm"], "s1": ["m.pgm"]})
        index = index_dataset(tmp_path)
        assert [s for s, _ in index.entries] == ["s1", "s2", "s2"]
        assert index.entries == tuple(sorted(index.entries))

    def test_layout_scaling(self, tmp_path):
        _make_dataset(tmp_path, {f"p{i:03d}": [f"{j}.pgm" for j in range(4)] for i in range(6)})
        index = index_dataset(tmp_path)
        assert len(index) == 24
        assert len(index.subjects) == 6

    def test_non_image_skipped_with_warning(self, tmp_path, caplog):
        _make_dataset(tmp_path, {"s1": ["a.pgm"]})
        (tmp_path / "s1" / "notes.txt").write_text("hi")
        with caplog.at_level(logging.WARNING):
            index = index_dataset(tmp_path)
        assert len(index) == 1
        assert any("notes.txt" in r.message for r in caplog.records)

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "s1").mkdir()
        with pytest.raises(EmptyDatasetError):
            index_dataset(tmp_path)


class TestSplit:
    def test_half_split(self, tmp_path):
        _make_dataset(tmp_path, {"a": [f"{i}.pgm" for i in range(10)], "b": [f"{i}.pgm" for i in range(10)]})
        index = index_dataset(tmp_path)
        train, test = split_dataset(index, SplitSpec(train_per_subject=5))
        assert len(train) == 10 and len(test) == 10
        for subject, paths in train.by_subject().items():
            assert len(paths) == 5

    def test_single_training_sample(self, tmp_path):
        _make_dataset(tmp_path, {"a": [f"{i}.pgm" for i in range(10)]})
        index = index_dataset(tmp_path)
        train, test = split_dataset(index, SplitSpec(train_per_subject=1))
        assert len(train) == 1 and len(test) == 9

    def test_first_n_takes_lexicographic_head(self, tmp_path):
        _make_dataset(tmp_path, {"a": ["c.pgm", "a.pgm", "b.pgm"]})
        index = index_dataset(tmp_path)
        train, _ = split_dataset(index, SplitSpec(train_per_subject=2, mode="first_n"))
        assert [p.rsplit("/", 1)[-1] for _, p in train.entries] == ["a.pgm", "b.pgm"]

    def test_deterministic(self, tmp_path):
        _make_dataset(tmp_path, {c: [f"{i}.pgm" for i in range(6)] for c in "abcd"})
        index = index_dataset(tmp_path)
        spec = SplitSpec(train_per_subject=3, seed=99, mode="random")
        assert split_dataset(index, spec) == split_dataset(index, spec)

    def test_random_seed_changes_split(self, tmp_path):
        _make_dataset(tmp_path, {c: [f"{i}.pgm" for i in range(8)] for c in "abcd"})
        index = index_dataset(tmp_path)
        one, _ = split_dataset(index, SplitSpec(train_per_subject=4, seed=1, mode="random"))
        two, _ = split_dataset(index, SplitSpec(train_per_subject=4, seed=2, mode="random"))
        assert one != two

    def test_insufficient_samples(self, tmp_path):
        _make_dataset(tmp_path, {"a": ["1.pgm", "2.pgm"]})
        index = index_dataset(tmp_path)
        with pytest.raises(InsufficientSamplesError):
            split_dataset(index, SplitSpec(train_per_subject=2))

    @given(
        layout=st.dictionaries(
            st.text(alphabet="abcdefgh", min_size=1, max_size=4),
            st.integers(min_value=2, max_value=8),
            min_size=1,
            max_size=5,
        ),
        seed=st.integers(min_value=0, max_value=2**63 - 1),
        mode=st.sampled_from(["first_n", "random"]),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_property(self, layout, seed, mode):
        entries = [
            (subject, f"/data/{subject}/img{i}.pgm")
            for subject, count in layout.items()
            for i in range(count)
        ]
        index = DatasetIndex.from_entries(entries)
        n = min(layout.values()) - 1
        if n < 1:
            return
        train, test = split_dataset(index, SplitSpec(train_per_subject=n, seed=seed, mode=mode))
        assert len(train) + len(test) == len(index)
        train_paths = {p for _, p in train.entries}
        test_paths = {p for _, p in test.entries}
        assert not train_paths & test_paths
        assert train_paths | test_paths == {p for _, p in index.entries}
        for subject in index.subjects:
            assert len(train.by_subject()[subject]) == n
