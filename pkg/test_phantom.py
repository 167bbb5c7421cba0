"""합성 phantom 생성기 / dataset 입출력 테스트."""
import numpy as np
import pytest

from etl.dataset_io import GT_FILE, VOLUME_FILE, read_dataset, scan_id, write_dataset
from etl.phantom import (
    DIFFICULTY_TABLE,
    Difficulty,
    NoduleSpec,
    PhantomSpec,
    TubeSpec,
    generate_dataset,
    generate_phantom,
)
from utils.errors import InputError, SpecError


def test_empty_spec_is_background():
    sample = generate_phantom(PhantomSpec(volume_dims=(8, 8, 8)))
    assert sample.volume.dims == (1, 8, 8, 8)
    assert np.all(sample.volume.values == 0.1)
    assert sample.gt_boxes == []


def test_sphere_gt_box():
    sample = generate_phantom(PhantomSpec(volume_dims=(16, 16, 16), nodules=[NoduleSpec(center=(8, 8, 8), radius=3)]))
    (box,) = sample.gt_boxes
    assert box.as_tuple() == (8.0, 8.0, 8.0, 6.0, 6.0, 6.0)
    assert sample.volume.values[0, 7, 7, 7] == pytest.approx(0.1 + 0.8)


def test_sphere_voxel_count_close_to_volume():
    sample = generate_phantom(PhantomSpec(volume_dims=(32, 32, 32), nodules=[NoduleSpec(center=(16, 16, 16), radius=4)]))
    expected = 4.0 / 3.0 * np.pi * 4 ** 3
    assert abs(sample.nodule_voxels - expected) <= 0.1 * expected


def test_tube_crosses_slices():
    tube = TubeSpec(path=[(-2, 8, 8), (18, 8, 8)], radius=2)
    sample = generate_phantom(PhantomSpec(volume_dims=(16, 16, 16), tubes=[tube]))
    values = sample.volume.values[0]
    assert np.all(values[:, 7, 7] == pytest.approx(0.1 + 0.7))
    assert sample.tube_voxels > 0 and sample.gt_boxes == []


def test_object_outside_volume_rejected():
    with pytest.raises(SpecError):
        generate_phantom(PhantomSpec(volume_dims=(16, 16, 16), nodules=[NoduleSpec(center=(100, 8, 8), radius=3)]))
    with pytest.raises(SpecError):
        generate_phantom(PhantomSpec(volume_dims=(16, 16, 16), tubes=[TubeSpec(path=[(40, 40, 40), (60, 40, 40)], radius=2)]))


def test_boundary_nodule_box_is_clipped():
    sample = generate_phantom(PhantomSpec(volume_dims=(16, 16, 16), nodules=[NoduleSpec(center=(1, 8, 8), radius=3)]))
    lo, hi = sample.gt_boxes[0].bounds()
    assert lo[0] == 0.0 and hi[0] == 4.0


def test_noise_is_seeded_and_clipped():
    spec = PhantomSpec(volume_dims=(8, 8, 8), noise_std=0.5, seed=3)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert a.volume == b.volume
    assert np.all((a.volume.values >= 0.0) & (a.volume.values <= 1.0))


@pytest.mark.parametrize("difficulty", list(Difficulty))
def test_dataset_is_seeded(difficulty):
    a = generate_dataset(3, difficulty, seed=1, dims=(16, 16, 16))
    b = generate_dataset(3, difficulty, seed=1, dims=(16, 16, 16))
    c = generate_dataset(3, difficulty, seed=2, dims=(16, 16, 16))
    for x, y in zip(a, b):
        assert x.volume == y.volume and x.gt_boxes == y.gt_boxes
    assert any(x.volume != z.volume for x, z in zip(a, c))
    lo, hi = DIFFICULTY_TABLE[difficulty]["tubes"]
    assert all(lo <= len(s.spec.tubes) <= hi for s in a)
    assert all(1 <= len(s.gt_boxes) for s in a)


def test_dataset_rejects_empty():
    with pytest.raises(SpecError):
        generate_dataset(0)


def test_dataset_round_trip_and_stable_bytes(tmp_path):
    samples = generate_dataset(2, "easy", seed=4, dims=(16, 16, 16))
    write_dataset(tmp_path / "a", samples)
    write_dataset(tmp_path / "b", generate_dataset(2, "easy", seed=4, dims=(16, 16, 16)))

    named = read_dataset(tmp_path / "a")
    assert [sid for sid, _ in named] == [scan_id(0), scan_id(1)]
    for (_, loaded), original in zip(named, samples):
        assert loaded.volume == original.volume
        assert loaded.gt_boxes == original.gt_boxes
    for sid, _ in named:
        for name in (VOLUME_FILE, GT_FILE):
            assert (tmp_path / "a" / sid / name).read_bytes() == (tmp_path / "b" / sid / name).read_bytes()


def test_read_dataset_errors(tmp_path):
    with pytest.raises(InputError):
        read_dataset(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(InputError):
        read_dataset(tmp_path / "empty")
    (tmp_path / "broken" / "sample_0000").mkdir(parents=True)
    with pytest.raises(InputError):
        read_dataset(tmp_path / "broken")
