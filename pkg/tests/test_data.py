import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from tacseg.data import (BACKGROUND, GAP, MIN_CONTRAST, SyntheticSample, augment_flip, flip_sample, gen_synthetic,
                         read_dataset, read_pgm, read_ppm, write_dataset, write_pgm, write_ppm)
from tacseg.metrics import InstanceMaskSet, miou
from tacseg.rng import stream


def same(a, b):
    return (a.image.tobytes() == b.image.tobytes() and len(a.instances) == len(b.instances)
            and all(np.array_equal(x, y) for x, y in zip(a.instances.masks, b.instances.masks)))


def test_deterministic():
    a, b = gen_synthetic(3, 4), gen_synthetic(3, 4)
    assert all(same(x, y) for x, y in zip(a, b))
    assert not same(gen_synthetic(4, 1)[0], a[0])


def test_prefix_stable():
    """Image i does not depend on how many images follow it."""
    assert same(gen_synthetic(5, 1)[0], gen_synthetic(5, 3)[0])


def test_splits_differ():
    assert not same(gen_synthetic(1, 1, split="train")[0], gen_synthetic(1, 1, split="eval")[0])


def test_counts_and_shapes_seed7():
    samples = gen_synthetic(7, 8)
    assert [s.image_id for s in samples] == [f"{i:04d}" for i in range(8)]
    for s in samples:
        assert s.image.shape == (3, 64, 64)
        assert 2 <= len(s.instances) <= 5
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_single_cell_range():
    assert all(len(s.instances) == 1 for s in gen_synthetic(0, 5, cells=(1, 1)))


def test_bad_cell_range():
    with pytest.raises(ValueError):
        gen_synthetic(0, 1, cells=(3, 2))


@pytest.mark.parametrize("seed", [0, 7, 11])
def test_instances_disjoint_with_gap(seed):
    for s in gen_synthetic(seed, 6, cells=(3, 5)):
        masks = s.instances.masks
        for i, a in enumerate(masks):
            grown = ndimage.binary_dilation(a, iterations=GAP)
            for b in masks[i + 1:]:
                assert not (grown & b).any()


def test_contrast_between_cells_and_background():
    for s in gen_synthetic(2, 6):
        fg = s.foreground()
        bg_mean = s.image[:, ~fg].mean(axis=1)
        for m in s.instances.masks:
            assert np.max(np.abs(s.image[:, m].mean(axis=1) - bg_mean)) >= MIN_CONTRAST - 0.05
        assert np.max(np.abs(bg_mean - BACKGROUND)) < 0.1


def test_instances_are_connected_blobs():
    for s in gen_synthetic(9, 4):
        for m in s.instances.masks:
            assert ndimage.label(m)[1] == 1


def test_small_images():
    samples = gen_synthetic(1, 3, 16, 16, cells=(1, 2))
    assert all(s.image.shape == (3, 16, 16) and len(s.instances) >= 1 for s in samples)


class TestFlip:
    def test_involution(self):
        s = gen_synthetic(0, 1)[0]
        assert same(flip_sample(flip_sample(s)), s)

    def test_left_blob_moves_right(self):
        image = np.zeros((3, 8, 8))
        m = np.zeros((8, 8), bool)
        m[2:5, 0:2] = True
        image[:, m] = 1.0
        f = flip_sample(SyntheticSample(image, InstanceMaskSet([m])))
        assert f.instances.masks[0][2:5, 6:8].all() and f.instances.masks[0].sum() == 6
        assert f.image[:, 2:5, 6:8].min() == 1.0

    def test_force_and_coin(self):
        s = gen_synthetic(0, 1)[0]
        rng = stream(0, "x")
        assert augment_flip(s, rng, force=False) is s
        assert same(augment_flip(s, rng, force=True), flip_sample(s))
        flips = sum(not same(augment_flip(s, stream(0, "coin", i)), s) for i in range(200))
        assert 70 < flips < 130

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2 ** 16))
    def test_miou_invariant_under_joint_flip(self, seed):
        s = gen_synthetic(seed, 1, 32, 32, cells=(1, 3))[0]
        rng = np.random.default_rng(seed)
        pred = InstanceMaskSet([np.roll(m, int(rng.integers(-2, 3)), axis=1) for m in s.instances.masks])
        flipped_pred = InstanceMaskSet([m[:, ::-1] for m in pred.masks])
        assert miou(pred, s.instances) == miou(flipped_pred, flip_sample(s).instances)


class TestNetpbm:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
        write_ppm(tmp_path / "a.ppm", img)
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
        assert read_ppm(tmp_path / "a.ppm").tobytes() == img.tobytes()

    def test_pgm_round_trip(self, tmp_path):
        m = np.random.default_rng(1).random((4, 6)) < 0.5
        write_pgm(tmp_path / "m.pgm", m)
        assert np.array_equal(read_pgm(tmp_path / "m.pgm"), m)

    def test_wrong_magic(self, tmp_path):
        write_pgm(tmp_path / "m.pgm", np.ones((2, 2)))
        with pytest.raises(ValueError, match="P6"):
            read_ppm(tmp_path / "m.pgm")

    def test_truncated(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ValueError, match="payload"):
            read_ppm(tmp_path / "t.ppm")


class TestDatasetDir:
    def test_round_trip(self, tmp_path):
        samples = gen_synthetic(4, 3)
        split = write_dataset(samples, tmp_path, "train", meta={"seed": 4})
        assert json.loads((split / "dataset.json").read_text()) == {"n_images": 3, "seed": 4, "split": "train"}
        assert sorted(p.name for p in (split / "0000").iterdir())[0] == "image.ppm"
        back = read_dataset(tmp_path, "train")
        assert [b.image_id for b in back] == [s.image_id for s in samples]
        assert all(same(a, b) for a, b in zip(samples, back))

    def test_refuses_non_empty(self, tmp_path):
        write_dataset(gen_synthetic(0, 1), tmp_path, "train")
        with pytest.raises(FileExistsError, match="--force"):
            write_dataset(gen_synthetic(1, 1), tmp_path, "train")
        write_dataset(gen_synthetic(1, 2), tmp_path, "train", force=True)
        assert len(read_dataset(tmp_path / "train")) == 2

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path / "nope")
