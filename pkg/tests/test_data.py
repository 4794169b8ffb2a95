import numpy as np
import pytest

from evc.data import TOY_KINDS, Dataset, DatasetSpec, load_split, toy_image, write_toy_corpus
from evc.errors import ShapeError, ValidationError
from evc.imageio import list_images, read_image, to_batch, to_pixels, write_image


class TestImageIO:
    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_lossless_roundtrip(self, tmp_path, rng, suffix):
        pixels = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
        path = tmp_path / f"img{suffix}"
        write_image(path, pixels)
        np.testing.assert_array_equal(read_image(path), pixels)

    def test_batch_conversion(self, rng):
        pixels = rng.integers(0, 256, (4, 6, 3)).astype(np.uint8)
        batch = to_batch(pixels, np.float64)
        assert batch.shape == (1, 3, 4, 6)
        assert batch.min() >= 0.0 and batch.max() <= 1.0
        np.testing.assert_array_equal(to_pixels(batch), pixels)

    def test_to_pixels_clips(self):
        batch = np.full((1, 3, 1, 1), 1.7)
        assert np.all(to_pixels(batch) == 255)

    def test_bad_shapes(self, tmp_path):
        with pytest.raises(ShapeError):
            write_image(tmp_path / "a.png", np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(ShapeError):
            to_pixels(np.zeros((3, 4, 4)))

    def test_bad_suffix(self, tmp_path):
        with pytest.raises(ValidationError):
            write_image(tmp_path / "a.jpg", np.zeros((2, 2, 3), dtype=np.uint8))

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_image(tmp_path / "none.png")
        with pytest.raises(FileNotFoundError):
            list_images(tmp_path / "none")

    def test_not_an_image(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not a png")
        with pytest.raises(ValidationError):
            read_image(path)


class TestToyCorpus:
    @pytest.mark.parametrize("kind", TOY_KINDS)
    def test_kinds(self, rng, kind):
        img = toy_image(rng, 32, kind)
        assert img.shape == (32, 32, 3) and img.dtype == np.uint8

    def test_unknown_kind(self, rng):
        with pytest.raises(ValidationError):
            toy_image(rng, 8, "clouds")

    def test_same_seed_same_files(self, tmp_path):
        a = write_toy_corpus(tmp_path / "a", 5, size=16, seed=3)
        b = write_toy_corpus(tmp_path / "b", 5, size=16, seed=3)
        assert [p.name for p in a] == [p.name for p in b]
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_listing_is_sorted(self, tmp_path):
        write_toy_corpus(tmp_path, 6, size=8)
        names = [p.name for p in list_images(tmp_path)]
        assert names == sorted(names) and len(names) == 6


class TestDataset:
    def test_batch_shape_and_range(self, dataset, rng):
        batch = dataset.sample_batch(rng, 3)
        assert batch.shape == (3, 3, 16, 16)
        assert batch.dtype == np.float64
        assert batch.min() >= 0.0 and batch.max() <= 1.0

    def test_seeded_batches_repeat(self, dataset):
        a = dataset.sample_batch(np.random.default_rng(1), 2)
        b = dataset.sample_batch(np.random.default_rng(1), 2)
        np.testing.assert_array_equal(a, b)

    def test_small_images_skipped(self, rng):
        ds = Dataset([rng.uniform(size=(3, 8, 8)), rng.uniform(size=(3, 20, 20))], crop=16)
        assert len(ds) == 1

    def test_empty(self, rng):
        with pytest.raises(ValidationError, match="empty"):
            Dataset([rng.uniform(size=(3, 8, 8))], crop=16)

    def test_center_crops(self, dataset):
        crops = dataset.center_crops()
        assert crops.shape == (4, 3, 16, 16)
        np.testing.assert_array_equal(crops[0], dataset.images[0][:, 4:20, 4:20])


class TestLoadSplit:
    def test_holdout(self, tmp_path):
        write_toy_corpus(tmp_path, 6, size=16)
        train, held = load_split(DatasetSpec(tmp_path, crop=8, holdout=2))
        assert len(train) == 4 and len(held) == 2
        assert not held.flip

    def test_no_holdout(self, tmp_path):
        write_toy_corpus(tmp_path, 3, size=16)
        train, held = load_split(DatasetSpec(tmp_path, crop=8))
        assert len(train) == 3 and held is None

    def test_holdout_takes_everything(self, tmp_path):
        write_toy_corpus(tmp_path, 2, size=16)
        with pytest.raises(ValidationError, match="holdout"):
            load_split(DatasetSpec(tmp_path, crop=8, holdout=2))

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ValidationError, match="empty"):
            load_split(DatasetSpec(tmp_path))

    def test_bad_spec(self, tmp_path):
        with pytest.raises(ValidationError):
            DatasetSpec(tmp_path, crop=0)
