import numpy as np
import pytest

from textvol._container import ContainerError
from textvol.volume_space import (
    DensityVolume,
    build_voxel_partition,
    load_atlas_partition,
    locate,
    locate_many,
    read_volume,
    write_nifti,
    write_volume,
)

from oracles import parse_nifti


BOX16 = [(0.0, 0.0, 0.0), (16.0, 16.0, 16.0)]


class TestBuildVoxelPartition:
    def test_full_box_counts(self):
        part = build_voxel_partition(BOX16, 4.0)
        assert part.shape == (4, 4, 4)
        assert part.n_regions == 64
        np.testing.assert_array_equal(part.volumes, np.full(64, 64.0))

    def test_mask_keeps_ten_voxels(self, rng):
        keep = np.zeros((4, 4, 4))
        flat = rng.choice(64, size=10, replace=False)
        keep.ravel()[flat] = 1.0
        mask = DensityVolume(values=keep, affine=np.diag([4.0, 4.0, 4.0, 1.0]))
        part = build_voxel_partition(BOX16, 4.0, mask=mask)
        assert part.n_regions == 10
        assert np.count_nonzero(part.region_of_voxel) == 10

    def test_volume_sum_is_exact(self, rng):
        keep = (rng.random((4, 4, 4)) > 0.5).astype(float)
        keep.ravel()[0] = 1.0
        mask = DensityVolume(values=keep, affine=np.diag([4.0, 4.0, 4.0, 1.0]))
        part = build_voxel_partition(BOX16, 4.0, mask=mask)
        assert part.volumes.sum() == np.count_nonzero(keep) * 4.0**3

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            build_voxel_partition(BOX16, -1.0)
        with pytest.raises(ValueError):
            build_voxel_partition([(0, 0, 0), (0, 16, 16)], 4.0)
        bad_mask = DensityVolume(values=np.ones((2, 2, 2)), affine=np.eye(4))
        with pytest.raises(ValueError, match="mask shape"):
            build_voxel_partition(BOX16, 4.0, mask=bad_mask)


class TestAtlasPartition:
    def _column_volume(self, labels):
        values = np.asarray(labels, dtype=float).reshape(len(labels), 1, 1)
        return DensityVolume(values=values, affine=np.eye(4))

    def test_two_region_column(self):
        part = load_atlas_partition(self._column_volume([1, 1, 2, 2]), ["amygdala", "insula"])
        assert part.n_regions == 2
        np.testing.assert_array_equal(part.volumes, [2.0, 2.0])
        assert part.labels == ("amygdala", "insula")

    def test_label_exceeding_name_table(self):
        with pytest.raises(ValueError, match="exceeds"):
            load_atlas_partition(self._column_volume([1, 2, 3, 3]), ["a", "b"])

    def test_all_zero_volume_is_an_error(self):
        with pytest.raises(ValueError):
            load_atlas_partition(self._column_volume([0, 0, 0, 0]), ["a"])

    def test_empty_region_is_an_error(self):
        with pytest.raises(ValueError, match="no voxels"):
            load_atlas_partition(self._column_volume([2, 2, 2, 2]), ["a", "b"])

    def test_names_are_normalized(self):
        part = load_atlas_partition(
            self._column_volume([1, 1, 2, 2]), ["Anterior  Cingulate", "INSULA"]
        )
        assert part.labels == ("anterior cingulate", "insula")


class TestLocate:
    def test_voxel_center_maps_to_its_region(self):
        part = build_voxel_partition(BOX16, 4.0)
        center = np.array([2.0, 2.0, 2.0])  # center of voxel (0,0,0)
        assert locate(part, center) == part.region_of_voxel[0, 0, 0]

    def test_point_outside_box_is_background(self):
        part = build_voxel_partition(BOX16, 4.0)
        assert locate(part, [-1.0, 8.0, 8.0]) == 0
        assert locate(part, [8.0, 8.0, 17.0]) == 0

    def test_half_open_boundary_rule(self):
        # x = 4.0 sits on the face between voxels 0 and 1: it belongs to the
        # voxel whose interval [4, 8) starts there.
        part = build_voxel_partition(BOX16, 4.0)
        assert locate(part, [4.0, 0.5, 0.5]) == part.region_of_voxel[1, 0, 0]
        assert locate(part, [4.0 - 1e-9, 0.5, 0.5]) == part.region_of_voxel[0, 0, 0]

    def test_boundary_rule_with_non_reciprocal_voxel_size(self):
        # 1/3 is not representable: exact IEEE division must still put x=6.0
        # in voxel 2 of a 3 mm grid.
        part = build_voxel_partition([(0, 0, 0), (9, 9, 9)], 3.0)
        assert locate(part, [6.0, 0.5, 0.5]) == part.region_of_voxel[2, 0, 0]

    def test_consistent_with_stored_labels_on_all_centers(self, rng):
        keep = (rng.random((4, 4, 4)) > 0.3).astype(float)
        keep.ravel()[0] = 1.0
        mask = DensityVolume(values=keep, affine=np.diag([4.0, 4.0, 4.0, 1.0]))
        part = build_voxel_partition(BOX16, 4.0, mask=mask)
        ii, jj, kk = np.meshgrid(*[np.arange(4)] * 3, indexing="ij")
        centers = (np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) + 0.5) * 4.0
        found = locate_many(part, centers)
        np.testing.assert_array_equal(found, part.region_of_voxel.ravel(order="C"))

    def test_jittered_boundary_property(self, rng):
        part = build_voxel_partition(BOX16, 4.0)
        for _ in range(200):
            i = int(rng.integers(1, 4))
            axis = int(rng.integers(0, 3))
            point = rng.uniform(0.5, 15.5, 3)
            point[axis] = 4.0 * i
            eps = float(rng.uniform(1e-9, 0.4))
            below, above = point.copy(), point.copy()
            below[axis] -= eps
            above[axis] += eps
            idx_on = np.floor(point / 4.0).astype(int)
            assert locate(part, point) == part.region_of_voxel[tuple(idx_on)]
            assert locate(part, above) == locate(part, point)
            assert locate(part, below) != locate(part, point)


class TestVolumeIO:
    def test_round_trip_is_bit_identical(self, rng, tmp_path):
        values = rng.random((4, 4, 4)).astype(np.float32).astype(np.float64)
        vol = DensityVolume(values=values, affine=np.diag([4.0, 4.0, 4.0, 1.0]))
        path = tmp_path / "vol.bin"
        write_volume(vol, path)
        back = read_volume(path)
        assert back.shape == vol.shape
        np.testing.assert_array_equal(back.values, vol.values)
        np.testing.assert_array_equal(back.affine, vol.affine)

    def test_wrong_magic_is_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTAVOL!" + b"\x00" * 100)
        with pytest.raises(ContainerError, match="magic"):
            read_volume(path)

    def test_truncated_payload_is_rejected(self, rng, tmp_path):
        vol = DensityVolume(values=rng.random((4, 4, 4)), affine=np.eye(4))
        path = tmp_path / "vol.bin"
        write_volume(vol, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(ContainerError, match="truncated"):
            read_volume(path)

    def test_non_finite_values_are_rejected(self, tmp_path):
        values = np.zeros((2, 2, 2))
        values[0, 0, 0] = np.inf
        vol = DensityVolume(values=values, affine=np.eye(4))
        with pytest.raises(ValueError, match="finite"):
            write_volume(vol, tmp_path / "nope.bin")

    def test_nifti_export_header_and_data(self, rng, tmp_path):
        values = rng.random((4, 3, 2)).astype(np.float32).astype(np.float64)
        affine = np.diag([4.0, 4.0, 4.0, 1.0])
        affine[:3, 3] = (-8.0, 2.0, 0.0)
        vol = DensityVolume(values=values, affine=affine)
        path = tmp_path / "vol.nii"
        write_nifti(vol, path)

        parsed = parse_nifti(path)  # independent struct-level reader
        assert parsed["sizeof_hdr"] == 348
        assert parsed["magic"] == b"n+1\x00"
        assert parsed["dim"][:4] == (3, 4, 3, 2)
        assert parsed["datatype"] == 16 and parsed["bitpix"] == 32
        np.testing.assert_allclose(parsed["pixdim"][1:4], (4.0, 4.0, 4.0))
        assert parsed["sform_code"] == 1
        np.testing.assert_allclose(parsed["srow_x"], affine[0])
        np.testing.assert_allclose(parsed["srow_y"], affine[1])
        np.testing.assert_allclose(parsed["srow_z"], affine[2])
        np.testing.assert_array_equal(parsed["data"], values.astype(np.float32))
