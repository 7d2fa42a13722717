import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from voxparts.errors import DataError, FormatError
from voxparts.formats import (
    read_feature_map,
    read_records,
    write_feature_map,
    write_records,
)
from voxparts.scenes import (
    SceneObject,
    SceneSpec,
    builtin_scene_spec,
    gen_scene,
    load_scene,
    oracle_features,
)


def small_spec(objects=None, frames=3):
    if objects is None:
        objects = [
            SceneObject("box", [0.8, 0.2, 0.2], [0.0, 0.0, 0.4],
                        size=[0.5, 0.5, 0.5], trajectory={"kind": "still"})
        ]
    return SceneSpec(
        resolution=[32, 32],
        frames=frames,
        objects=objects,
        camera={"path": "hemisphere_random", "radius": 3.5,
                "elevation_deg": [35.0, 65.0], "target": [0.0, 0.0, 0.3]},
        bbox=[[-1.6, -1.6, -0.13], [1.6, 1.6, 2.0]],
        floor={"albedo": [0.6, 0.6, 0.6], "size": 3.0, "thickness": 0.12},
        supersample=1,
    )


class TestGenerator:
    def test_static_scene_identical_masks(self, tmp_path):
        spec = small_spec(frames=2)
        out = gen_scene(spec, seed=3, out_dir=tmp_path / "s")
        ds = load_scene(out)
        # same object layout; camera moves, so compare canonical projections:
        # a still scene keeps object pixel COUNTS similar but not equal, so
        # instead verify via a fixed camera path
        spec.camera = {"path": "smooth_orbit", "radius": 3.5, "sweep_deg": 0.0,
                       "azimuth0": 0.7, "elevation_deg_fixed": 45.0,
                       "target": [0.0, 0.0, 0.3]}
        out2 = gen_scene(spec, seed=3, out_dir=tmp_path / "s2")
        ds2 = load_scene(out2)
        assert np.array_equal(ds2.gt_masks[0], ds2.gt_masks[1])

    def test_falling_sphere_descends_in_image(self, tmp_path):
        objects = [
            SceneObject("sphere", [0.9, 0.1, 0.1], [0.0, 0.0, 1.4], radius=0.3,
                        trajectory={"kind": "fall", "gravity": 2.2, "rest_z": 0.3})
        ]
        spec = small_spec(objects, frames=4)
        spec.camera = {"path": "smooth_orbit", "radius": 3.5, "sweep_deg": 0.0,
                       "azimuth0": 0.0, "elevation_deg_fixed": 40.0,
                       "target": [0.0, 0.0, 0.7]}
        ds = load_scene(gen_scene(spec, seed=0, out_dir=tmp_path / "fall"))
        rows = []
        for k in range(4):
            ys, xs = np.nonzero(ds.gt_masks[k] == 1)
            assert len(ys) > 0
            rows.append(ys.mean())
        # a dropping object moves down the image (row index grows)
        assert rows[0] < rows[1] < rows[2] < rows[3]

    def test_fixed_seed_bit_identical(self, tmp_path):
        spec = small_spec()
        a = gen_scene(spec, seed=11, out_dir=tmp_path / "a")
        b = gen_scene(spec, seed=11, out_dir=tmp_path / "b")
        for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel

    def test_overlapping_objects_rejected(self, tmp_path):
        objects = [
            SceneObject("sphere", [0.9, 0.1, 0.1], [0.0, 0.0, 0.5], radius=0.4),
            SceneObject("sphere", [0.1, 0.9, 0.1], [0.3, 0.0, 0.5], radius=0.4),
        ]
        with pytest.raises(DataError, match="overlap"):
            gen_scene(small_spec(objects), seed=0, out_dir=tmp_path / "x")

    def test_masks_match_depth_discontinuities(self, tmp_path):
        spec = small_spec()
        ds = load_scene(gen_scene(spec, seed=5, out_dir=tmp_path / "d"))
        from voxparts.formats import read_depth

        depth = read_depth(tmp_path / "d" / "depth" / "0000.bin")
        mask = ds.gt_masks[0]
        # inside-object pixels have finite depth
        assert np.all(depth[mask == 1] > 0)


class TestOracleFeatures:
    def test_zero_noise_piecewise_constant(self):
        masks = np.zeros((8, 8), dtype=np.int64)
        masks[:4] = 1
        feat = oracle_features(None, masks, d_out=16, noise_sigma=0.0, seed=4)
        assert feat.shape == (16, 8, 8)
        top = feat[:, 0, 0]
        assert np.allclose(feat[:, :4, :], top[:, None, None])
        assert not np.allclose(feat[:, 4:, :], top[:, None, None])

    def test_objects_weakly_correlated(self):
        masks = np.zeros((2, 2), dtype=np.int64)
        masks[0, :] = 1
        masks[1, :] = 2
        bad = 0
        for seed in range(1000):
            f = oracle_features(None, masks, 16, 0.0, seed)
            a = f[:, 0, 0]
            b = f[:, 1, 0]
            cos = float(a @ b)
            if abs(cos) >= 0.5:
                bad += 1
        assert bad / 1000 < 0.01

    def test_feature_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((5, 7, 3)).astype(np.float32)
        p = tmp_path / "f.dvft"
        write_feature_map(p, arr)
        back = read_feature_map(p)
        assert np.array_equal(arr, back)

    def test_truncated_payload_raises(self, tmp_path):
        arr = np.zeros((2, 4, 4), dtype=np.float32)
        p = tmp_path / "f.dvft"
        write_feature_map(p, arr)
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(FormatError, match="payload"):
            read_feature_map(p)

    def test_externally_written_file_loads(self, tmp_path):
        # file written by independent struct code following the format spec
        import struct

        arr = np.arange(24, dtype="<f4").reshape(2, 3, 4)
        p = tmp_path / "ext.dvft"
        with open(p, "wb") as fh:
            fh.write(b"DVFT")
            fh.write(struct.pack("<III", 2, 3, 4))
            fh.write(arr.tobytes())
        assert np.array_equal(read_feature_map(p), arr)


class TestLoader:
    def test_generated_scene_loads(self, tmp_path):
        ds = load_scene(gen_scene(small_spec(), seed=2, out_dir=tmp_path / "ok"))
        assert ds.frame_count == 3
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert ds.features.shape[1] == 16
        assert ds.gt_masks.shape == (3, 32, 32)

    def test_missing_image_named(self, tmp_path):
        out = gen_scene(small_spec(), seed=2, out_dir=tmp_path / "m")
        (out / "frames" / "0001.png").unlink()
        with pytest.raises(DataError, match="0001.png"):
            load_scene(out)

    def test_bad_pose_rejected(self, tmp_path):
        out = gen_scene(small_spec(), seed=2, out_dir=tmp_path / "p")
        manifest = json.loads((out / "manifest.json").read_text())
        pose = np.asarray(manifest["frame_data"][0]["pose"]).reshape(4, 4)
        pose[:3, 0] = -pose[:3, 0]  # determinant flips to -1
        manifest["frame_data"][0]["pose"] = [float(x) for x in pose.reshape(-1)]
        (out / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError, match="determinant|orthonormal"):
            load_scene(out)


class TestRecords:
    def test_roundtrip_and_idempotent_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = {
            "a": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.integers(0, 10, size=(5,)).astype(np.int64),
            "c": rng.standard_normal(7).astype(np.float64),
            "raw": np.frombuffer(b"hello world", dtype=np.uint8),
        }
        p1, p2 = tmp_path / "x1.bin", tmp_path / "x2.bin"
        write_records(p1, b"DVOL", 1, recs)
        version, back = read_records(p1, b"DVOL")
        assert version == 1
        for k in recs:
            assert np.array_equal(recs[k], back[k])
        write_records(p2, b"DVOL", 1, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_magic_is_format_error(self, tmp_path):
        p = tmp_path / "x.bin"
        write_records(p, b"DVOL", 1, {"a": np.zeros(3, dtype=np.float32)})
        data = bytearray(p.read_bytes())
        data[0] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            read_records(p, b"DVOL")

    def test_truncated_file_is_format_error(self, tmp_path):
        p = tmp_path / "x.bin"
        write_records(p, b"DVOL", 1, {"a": np.zeros(100, dtype=np.float32)})
        p.write_bytes(p.read_bytes()[:-30])
        with pytest.raises(FormatError):
            read_records(p, b"DVOL")


class TestBuiltinScenes:
    @pytest.mark.parametrize("name", ["toy2", "toy3fall", "toy3rand", "toy_still"])
    def test_specs_valid(self, name):
        spec = builtin_scene_spec(name)
        assert spec.frames == 20
        assert all(0 <= c <= 1 for o in spec.objects for c in o.albedo)

    def test_toy2_generates_and_loads(self, tmp_path):
        spec = builtin_scene_spec("toy2")
        spec.frames = 2
        spec.resolution = [24, 24]
        ds = load_scene(gen_scene(spec, seed=1, out_dir=tmp_path / "t2"))
        assert ds.frame_count == 2
