import json
import struct

import numpy as np
import pytest

from nlosvox import (
    MalformedMagicError,
    NegativeIntensityError,
    SceneParseError,
    SceneSemanticError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    ValidationError,
    export_ply,
    export_slices,
    grid_new,
    parse_scene,
    read_dataset,
    read_scene,
    read_volume,
    simulate_dataset,
    write_dataset,
    write_report,
    write_volume,
)
from nlosvox.formats import dataset_bytes, parse_dataset, read_pgm, read_ply, read_report, volume_bytes

MINIMAL = """
laser_origin = [0.0, -1.0, 0.5]
camera_origin = [0.0, -1.0, 0.4]

[wall]
origin = [-0.5, -0.5, 0.0]
edge_u = [1.0, 0.0, 0.0]
edge_v = [0.0, 1.0, 0.0]
pixels = [4, 3]

[lasers]
points = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]

[time]
dt = 5e-11
"""

RECT = """
[[hidden.rectangles]]
origin = [-0.5, -0.25, 0.8]
edge_u = [1.0, 0.0, 0.0]
edge_v = [0.0, 0.5, 0.0]
density = 100.0
flip = true
"""


@pytest.fixture
def volume():
    g = grid_new(((0, 0, 0), (1.0, 0.5, 0.75)), 8)
    g.values[...] = np.random.default_rng(0).uniform(0, 1, g.resolution)
    return g


class TestDatasetFile:
    def test_round_trip(self, tmp_path, two_patch):
        path = tmp_path / "a.nltd"
        write_dataset(two_patch, path)
        back = read_dataset(path)
        write_dataset(back, tmp_path / "b.nltd")
        assert path.read_bytes() == (tmp_path / "b.nltd").read_bytes()
        np.testing.assert_array_equal(back.intensity, two_patch.intensity.astype(np.float32))
        np.testing.assert_array_equal(back.wall.positions, two_patch.wall.positions)
        assert back.axis == two_patch.axis

    def test_header_layout(self, two_patch):
        blob = dataset_bytes(two_patch)
        magic, version, S, P, T = struct.unpack_from("<4sHIII", blob)
        assert (magic, version, (S, P, T)) == (b"NLTD", 1, two_patch.shape)
        S, P, T = two_patch.shape
        assert len(blob) == 42 + S * 32 + P * 32 + S * P * T * 4

    def test_bad_magic(self, two_patch):
        with pytest.raises(MalformedMagicError) as err:
            parse_dataset(b"XXXX" + dataset_bytes(two_patch)[4:])
        assert err.value.offset == 0

    def test_version(self, two_patch):
        blob = bytearray(dataset_bytes(two_patch))
        blob[4:6] = struct.pack("<H", 7)
        with pytest.raises(UnsupportedVersionError) as err:
            parse_dataset(bytes(blob))
        assert err.value.offset == 4

    def test_truncated(self, two_patch):
        with pytest.raises(TruncatedPayloadError) as err:
            parse_dataset(dataset_bytes(two_patch)[:-4])
        assert err.value.offset is not None

    def test_huge_counts_do_not_allocate(self, two_patch):
        blob = bytearray(dataset_bytes(two_patch))
        blob[6:18] = struct.pack("<III", 2**31, 2**31, 2**31)
        with pytest.raises(TruncatedPayloadError):
            parse_dataset(bytes(blob))

    def test_negative_intensity(self, two_patch):
        blob = bytearray(dataset_bytes(two_patch))
        S, P, _ = two_patch.shape
        start = 42 + S * 32 + P * 32
        blob[start + 40 : start + 44] = struct.pack("<f", -1.0)
        with pytest.raises(NegativeIntensityError) as err:
            parse_dataset(bytes(blob))
        assert err.value.offset == start + 40

    def test_nan_intensity(self, two_patch):
        blob = bytearray(dataset_bytes(two_patch))
        blob[-4:] = struct.pack("<f", float("nan"))
        with pytest.raises(NegativeIntensityError):
            parse_dataset(bytes(blob))

    @pytest.mark.parametrize("cut", [0, 3])
    def test_too_short_for_magic(self, two_patch, cut):
        with pytest.raises(MalformedMagicError):
            parse_dataset(dataset_bytes(two_patch)[:cut])

    @pytest.mark.parametrize("cut", [5, 20, 41])
    def test_short_headers(self, two_patch, cut):
        with pytest.raises(TruncatedPayloadError):
            parse_dataset(dataset_bytes(two_patch)[:cut])

    def test_error_names_path(self, tmp_path):
        path = tmp_path / "junk.nltd"
        path.write_bytes(b"NOPE" + bytes(60))
        with pytest.raises(MalformedMagicError, match="junk.nltd"):
            read_dataset(path)


class TestVolumeFile:
    @pytest.mark.parametrize("mode", ["float", "int"])
    def test_round_trip(self, tmp_path, volume, mode):
        g = volume if mode == "float" else volume.like("int", (volume.values * 1000).astype(np.uint32))
        write_volume(g, tmp_path / "v.nlvg")
        back = read_volume(tmp_path / "v.nlvg")
        assert back.mode == mode and back.resolution == g.resolution
        assert back.values.tobytes() == g.values.tobytes()
        assert back.voxel_size == g.voxel_size
        assert volume_bytes(back) == volume_bytes(g)

    def test_x_fastest(self, volume):
        blob = volume_bytes(volume)
        payload = np.frombuffer(blob[-volume.size * 8 :], "<f8")
        assert payload[1] == volume.values[1, 0, 0]

    def test_bad_mode_tag(self, volume):
        blob = bytearray(volume_bytes(volume))
        blob[4 + 2 + 12 + 48] = 9
        with pytest.raises(Exception) as err:
            read_volume_bytes(bytes(blob))
        assert type(err.value).__name__.endswith("Error")

    def test_truncated(self, volume):
        with pytest.raises(TruncatedPayloadError):
            read_volume_bytes(volume_bytes(volume)[:-1])


def read_volume_bytes(blob):
    from nlosvox.formats import parse_volume

    return parse_volume(blob)


class TestScene:
    def test_minimal(self):
        scene = parse_scene(MINIMAL)
        assert scene.wall_sampling().pixels == 12
        assert scene.laser_sampling().shots == 2
        assert len(scene.hidden) == 0

    def test_density_rectangle(self):
        scene = parse_scene(MINIMAL + RECT)
        assert len(scene.hidden) == 50
        np.testing.assert_allclose(scene.hidden.areas, 0.01)
        np.testing.assert_allclose(scene.hidden.normals, [[0, 0, -1]] * 50)

    def test_auto_time_block_fits_arrivals(self):
        scene = parse_scene(MINIMAL + RECT)
        ds = simulate_dataset(scene)
        assert ds.intensity.sum() > 0
        per_bin = ds.intensity.sum(axis=(0, 1))
        assert per_bin[0] == 0 and per_bin[-1] == 0

    def test_laser_grid(self):
        text = MINIMAL.replace(
            "points = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]",
            "[lasers.grid]\norigin = [0.0, 0.0, 0.0]\nedge_u = [0.2, 0.0, 0.0]\nedge_v = [0.0, 0.2, 0.0]\ncounts = [2, 3]",
        )
        assert parse_scene(text).laser_sampling().shots == 6

    def test_repository_scenes(self, scene_path):
        for name in ("two_patch", "scaling", "point"):
            assert len(read_scene(scene_path(name)).hidden) > 0

    def test_syntax_error_has_line(self):
        with pytest.raises(SceneParseError) as err:
            parse_scene(MINIMAL + "\n[time\n")
        assert err.value.line is not None

    @pytest.mark.parametrize(
        "old, new, field",
        [
            ("pixels = [4, 3]", "pixels = [0, 3]", "wall.pixels"),
            ("dt = 5e-11", "dt = -1.0", "time.dt"),
            ("points = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]", "points = []", "lasers.points"),
        ],
    )
    def test_semantic_errors_name_field(self, old, new, field):
        with pytest.raises(SceneSemanticError) as err:
            parse_scene(MINIMAL.replace(old, new))
        assert err.value.field == field

    def test_zero_area_wall(self):
        with pytest.raises(SceneSemanticError):
            parse_scene(MINIMAL.replace("edge_v = [0.0, 1.0, 0.0]", "edge_v = [2.0, 0.0, 0.0]"))

    def test_missing_wall(self):
        with pytest.raises(SceneSemanticError) as err:
            parse_scene(MINIMAL.replace("[wall]", "[walls]"))
        assert err.value.field == "wall"


class TestExports:
    def test_ply_threshold_one_is_argmax(self, tmp_path, volume):
        n = export_ply(volume, tmp_path / "a.ply", threshold=1.0)
        pts = read_ply(tmp_path / "a.ply")
        assert n == len(pts) == 1
        ijk = np.unravel_index(np.argmax(volume.values), volume.resolution)
        np.testing.assert_allclose(pts[0, :3], volume.lo + (np.array(ijk) + 0.5) * volume.voxel_size)
        # confidence is the stored accumulator value
        assert pts[0, 3] == volume.values.max()

    @pytest.mark.parametrize("binary", [False, True])
    def test_ply_count(self, tmp_path, volume, binary):
        n = export_ply(volume, tmp_path / "a.ply", threshold=0.3, binary=binary)
        assert n == int((volume.normalized() >= 0.3).sum())
        pts = read_ply(tmp_path / "a.ply")
        assert pts.shape == (n, 4) and pts[:, 3].min() >= 0.3 * volume.values.max()
        header = (tmp_path / "a.ply").read_bytes().split(b"end_header")[0].decode()
        assert f"element vertex {n}" in header and "property double confidence" in header

    def test_ply_empty_grid(self, tmp_path):
        assert export_ply(grid_new(((0, 0, 0), (1, 1, 1)), 4), tmp_path / "z.ply") == 0
        assert len(read_ply(tmp_path / "z.ply")) == 0

    def test_ply_threshold_range(self, tmp_path, volume):
        with pytest.raises(ValidationError):
            export_ply(volume, tmp_path / "a.ply", threshold=1.5)

    def test_slices(self, tmp_path, volume):
        paths = export_slices(volume, tmp_path / "s", axis=1)
        assert len(paths) == volume.resolution[1]
        img = read_pgm(paths[0])
        assert img.dtype == np.uint8
        assert img.shape in {(volume.resolution[0], volume.resolution[2]), (volume.resolution[2], volume.resolution[0])}
        assert max(read_pgm(p).max() for p in paths) == 255
        assert paths[0].read_bytes().startswith(b"P5")

    def test_black_slices(self, tmp_path):
        paths = export_slices(grid_new(((0, 0, 0), (1, 1, 1)), 3), tmp_path)
        assert all(read_pgm(p).max() == 0 for p in paths)

    def test_report(self, tmp_path):
        report = {"times": np.array([1.5, 2.0]), "n": np.int64(3), "name": "x"}
        write_report(report, tmp_path / "r.json")
        back = read_report(tmp_path / "r.json")
        assert back == {"times": [1.5, 2.0], "n": 3, "name": "x"}
        json.loads((tmp_path / "r.json").read_text())

    def test_unwritable(self, tmp_path, volume):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            write_volume(volume, blocker / "sub" / "v.nlvg")
