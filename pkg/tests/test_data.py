import numpy as np
import pytest
from PIL import Image

from models_schemas import SplitSpec
from services_autodiff import DTYPE, ShapeMismatchError, Tensor
from services_data import (
    DatasetError,
    EmptyDatasetError,
    ImageIOError,
    MissingCounterpartError,
    PairedDataset,
    PairedSample,
    SplitError,
    decode_image,
    encode_png,
    load_paired,
    materialize,
    pixels_to_unit,
    read_image,
    resize_tensor,
    resolve_split,
    split,
    stack_batch,
    synth_shapes,
    to_unpaired,
    write_image,
)


def save_png(path, pixels):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def dummy_dataset(n):
    return PairedDataset([
        PairedSample(image=Tensor(np.full((1, 1, 2, 2), i, dtype=DTYPE)), mask=Tensor(-np.ones((1, 1, 2, 2))), name=f"{i:04d}.png")
        for i in range(n)
    ])


class TestPixelMapping:
    def test_linear_map_endpoints(self):
        np.testing.assert_allclose(pixels_to_unit(np.array([0.0, 127.5, 255.0])), [-1.0, 0.0, 1.0])

    def test_mask_file_is_binarised(self, tmp_path):
        pixels = np.zeros((8, 8), dtype=np.uint8)
        pixels[2:5, 3:7] = 255
        pixels[0, 0] = 200
        save_png(tmp_path / "m.png", pixels)
        mask = read_image(tmp_path / "m.png", mask=True)
        assert set(np.unique(mask.data)) == {-1.0, 1.0}
        assert mask.data[0, 0, 0, 0] == 1.0
        assert mask.data[0, 0, 7, 7] == -1.0

    def test_rgb_file_keeps_three_channels(self, tmp_path):
        save_png(tmp_path / "rgb.png", np.zeros((6, 5, 3)))
        assert read_image(tmp_path / "rgb.png").shape == (1, 3, 6, 5)
        assert read_image(tmp_path / "rgb.png", channels=1).shape == (1, 1, 6, 5)


class TestLoadPaired:
    def test_orphan_is_named(self, tmp_path):
        for name in ("a.png", "b.png"):
            save_png(tmp_path / "images" / name, np.zeros((4, 4)))
        save_png(tmp_path / "masks" / "a.png", np.zeros((4, 4)))
        with pytest.raises(MissingCounterpartError, match="b.png") as excinfo:
            load_paired(tmp_path, 4)
        assert excinfo.value.orphans == ["b.png"]

    def test_missing_directory(self, tmp_path):
        (tmp_path / "images").mkdir()
        with pytest.raises(DatasetError):
            load_paired(tmp_path, 16)

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        with pytest.raises(EmptyDatasetError):
            load_paired(tmp_path, 16)

    def test_unreadable_file_reports_path(self, tmp_path):
        for sub in ("images", "masks"):
            (tmp_path / sub).mkdir()
            (tmp_path / sub / "c.png").write_bytes(b"not an image")
        with pytest.raises(ImageIOError) as excinfo:
            load_paired(tmp_path, 16)
        assert excinfo.value.path.endswith("c.png")

    def test_loads_materialized_synthetic_data(self, synth_dir):
        ds = load_paired(synth_dir, 16)
        original = synth_shapes(12, 16, seed=5)
        assert ds.names == sorted(ds.names) == original.names
        for loaded, made in zip(ds, original):
            np.testing.assert_array_equal(loaded.image.data, made.image.data)
            np.testing.assert_array_equal(loaded.mask.data, made.mask.data)

    def test_resizes_to_requested_size(self, synth_dir):
        ds = load_paired(synth_dir, 8)
        assert ds[0].image.shape == (1, 1, 8, 8)
        assert ds[0].mask.shape == (1, 1, 8, 8)
        assert set(np.unique(ds[0].mask.data)) <= {-1.0, 1.0}


class TestSplit:
    @pytest.mark.parametrize("n, n_train, n_test", [(40, 35, 5), (366, 320, 46)])
    def test_published_sizes(self, n, n_train, n_test):
        train, test = split(dummy_dataset(n), SplitSpec(n_train=n_train, n_test=n_test, seed=0))
        assert (len(train), len(test)) == (n_train, n_test)
        assert sorted(train.names + test.names) == dummy_dataset(n).names
        assert not set(train.names) & set(test.names)

    @pytest.mark.parametrize("preset, n, expected", [("particles", 40, (35, 5)), ("bacteria", 366, (320, 46))])
    def test_presets(self, preset, n, expected):
        spec = resolve_split(n, preset=preset)
        assert (spec.n_train, spec.n_test) == expected

    def test_default_holds_out_an_eighth(self):
        spec = resolve_split(40)
        assert (spec.n_train, spec.n_test) == (35, 5)
        assert resolve_split(3).n_test == 1

    def test_one_count_implies_the_other(self):
        assert resolve_split(12, n_train=9).n_test == 3
        assert resolve_split(12, n_test=4).n_train == 8

    def test_bad_counts(self):
        with pytest.raises(SplitError):
            resolve_split(10, n_train=8, n_test=8)
        with pytest.raises(SplitError):
            resolve_split(10, preset="bacteria")
        with pytest.raises(SplitError):
            resolve_split(10, preset="unknown")

    def test_size_mismatch(self):
        with pytest.raises(SplitError):
            split(dummy_dataset(10), SplitSpec(n_train=5, n_test=4))

    def test_seeded_partition(self):
        ds = dummy_dataset(30)
        first = split(ds, SplitSpec(n_train=25, n_test=5, seed=1))
        again = split(ds, SplitSpec(n_train=25, n_test=5, seed=1))
        other = split(ds, SplitSpec(n_train=25, n_test=5, seed=2))
        assert first[1].names == again[1].names
        assert first[1].names != other[1].names


class TestSynthShapes:
    def test_seeded_determinism(self):
        first, second = synth_shapes(8, 32, 7), synth_shapes(8, 32, 7)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.image.data, b.image.data)
            np.testing.assert_array_equal(a.mask.data, b.mask.data)
        assert first.names == [f"synth_{i:04d}.png" for i in range(8)]

    def test_value_ranges(self):
        for sample in synth_shapes(8, 32, 7):
            assert set(np.unique(sample.mask.data)) <= {-1.0, 1.0}
            assert sample.image.data.min() >= -1.0 and sample.image.data.max() <= 1.0

    def test_foreground_fraction(self):
        ds = synth_shapes(100, 32, 0)
        fraction = np.mean([np.mean(s.mask.data > 0) for s in ds])
        assert 0.05 <= fraction <= 0.5

    def test_shapes_are_brighter_than_background(self):
        sample = synth_shapes(1, 32, 3)[0]
        foreground = sample.mask.data > 0
        assert sample.image.data[foreground].mean() > sample.image.data[~foreground].mean() + 1.0

    @pytest.mark.parametrize("n, size", [(0, 32), (4, 8)])
    def test_invalid_arguments(self, n, size):
        with pytest.raises(DatasetError):
            synth_shapes(n, size, 0)


class TestToUnpaired:
    def test_sizes_and_shuffle(self):
        ds = synth_shapes(6, 16, 1)
        unpaired = to_unpaired(ds, seed=4)
        assert len(unpaired.domain_a) == len(unpaired.domain_b) == len(ds)
        assert unpaired.names_a == ds.names
        assert any(
            not np.array_equal(unpaired.domain_b[i].data, ds[i].mask.data) for i in range(len(ds))
        )

    def test_same_seed_same_shuffle(self):
        ds = synth_shapes(5, 16, 1)
        first, second = to_unpaired(ds, seed=9), to_unpaired(ds, seed=9)
        for a, b in zip(first.domain_b, second.domain_b):
            np.testing.assert_array_equal(a.data, b.data)


class TestImageFiles:
    def test_all_ones_writes_white(self, tmp_path):
        path = write_image(Tensor(np.ones((1, 1, 4, 4), dtype=DTYPE)), tmp_path / "white.png")
        with Image.open(path) as img:
            assert np.all(np.asarray(img) == 255)

    def test_mask_and_image_round_trip(self, tmp_path):
        sample = synth_shapes(1, 16, 2)[0]
        write_image(sample.mask, tmp_path / "mask.png")
        write_image(sample.image, tmp_path / "image.png")
        np.testing.assert_array_equal(read_image(tmp_path / "mask.png", mask=True).data, sample.mask.data)
        np.testing.assert_array_equal(read_image(tmp_path / "image.png").data, sample.image.data)

    def test_read_with_resize(self, tmp_path):
        write_image(synth_shapes(1, 64, 0)[0].image, tmp_path / "big.png")
        assert read_image(tmp_path / "big.png", size=32).shape == (1, 1, 32, 32)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageIOError) as excinfo:
            read_image(tmp_path / "absent.png")
        assert "absent.png" in excinfo.value.path

    def test_undecodable_bytes(self):
        with pytest.raises(ImageIOError):
            decode_image(b"\x00\x01garbage")

    def test_rejects_two_channel_tensor(self):
        with pytest.raises(ShapeMismatchError):
            encode_png(np.zeros((1, 2, 4, 4), dtype=DTYPE))

    def test_resize_tensor_keeps_masks_binary(self):
        mask = synth_shapes(1, 32, 6)[0].mask
        small = resize_tensor(mask, 16, 16, mask=True)
        assert small.shape == (1, 1, 16, 16)
        assert set(np.unique(small.data)) <= {-1.0, 1.0}

    def test_materialize_layout(self, tmp_path):
        written = materialize(synth_shapes(3, 16, 0), tmp_path)
        assert len(written) == 6
        assert sorted(p.name for p in (tmp_path / "images").iterdir()) == [f"synth_{i:04d}.png" for i in range(3)]

    def test_stack_batch(self):
        ds = synth_shapes(3, 16, 0)
        assert stack_batch([s.image for s in ds]).shape == (3, 1, 16, 16)
