import hashlib

import numpy as np
import pytest

from prunematch import data
from prunematch.config import PipelineConfig
from prunematch.data import (
    SceneConfig,
    dataset,
    export_sample,
    generate_pair,
    pair_at,
    read_pgm,
    read_sidecar,
    to_uint8,
    write_pgm,
)
from prunematch.errors import ConfigError, InputShapeError, PGMError
from prunematch.geometry import Pose, depth_validity, gt_coarse_assignment


def digest(sample):
    h = hashlib.sha256()
    for arr in (sample.image_a, sample.image_b, sample.depth_a, sample.depth_b, sample.homography):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class TestSceneConfig:
    @pytest.mark.parametrize("kwargs", [{"image_size": (60, 64)}, {"invalid_depth_fraction": 1.0},
                                        {"texture": "plaid"}, {"plane_depth": 0.0}])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            SceneConfig(**kwargs)

    def test_from_pipeline(self):
        cfg = PipelineConfig(seed=9)
        sc = SceneConfig.from_pipeline(cfg, seed=3, texture="blobs")
        assert sc.seed == 3 and sc.texture == "blobs" and sc.image_size == tuple(cfg.image_size)


class TestGeneratePair:
    def test_identity_pose(self):
        s = generate_pair(SceneConfig(seed=4).identity())
        np.testing.assert_array_equal(s.image_a, s.image_b)
        np.testing.assert_allclose(s.homography, np.eye(3), atol=1e-15)

    def test_seed_determinism(self):
        assert digest(generate_pair(SceneConfig(seed=7))) == digest(generate_pair(SceneConfig(seed=7)))

    @pytest.mark.parametrize("texture", ["blobs", "gratings", "mixed"])
    def test_invariants(self, texture):
        for seed in range(5):
            s = generate_pair(SceneConfig(texture=texture, seed=seed))
            s.check(tol=1e-6)
            assert s.image_a.shape == (64, 64)
            assert s.image_a.min() >= 0 and s.image_a.max() <= 1
            assert s.image_a.std() > 0.05

    def test_invalid_fraction(self):
        s = generate_pair(SceneConfig(invalid_depth_fraction=0.25, seed=1))
        frac = np.mean(s.depth_a == 0)
        assert 0.15 < frac < 0.35
        assert np.all(generate_pair(SceneConfig(invalid_depth_fraction=0.0, seed=1)).depth_a > 0)

    def test_hole_is_flat(self):
        for seed in range(5):
            s = generate_pair(SceneConfig(seed=seed))
            for img, depth in ((s.image_a, s.depth_a), (s.image_b, s.depth_b)):
                assert np.all(img[depth == 0] == data.HOLE_INTENSITY)
                assert np.all(img[depth > 0] < data.HOLE_INTENSITY)

    def test_hole_is_shared_between_views(self):
        for seed in range(5):
            s = generate_pair(SceneConfig(seed=seed))
            ys, xs = np.nonzero(s.depth_b == 0)
            pts = np.stack([xs, ys, np.ones_like(xs)], axis=1) @ np.linalg.inv(s.homography).T
            pts = np.rint(pts[:, :2] / pts[:, 2:]).astype(int)
            inside = np.all((pts >= 0) & (pts < 64), axis=1)
            hit = s.depth_a[pts[inside, 1], pts[inside, 0]] == 0
            assert hit.mean() > 0.9

    def test_identity_assignment_covers_valid_cells(self):
        s = generate_pair(SceneConfig(seed=12).identity())
        idx = np.arange(64)
        valid = depth_validity(s.depth_a) * depth_validity(s.depth_b)
        np.testing.assert_array_equal(gt_coarse_assignment(s, idx, idx), np.diag(valid))

    def test_plane_behind_camera_raises(self, monkeypatch):
        behind = Pose(np.eye(3), np.array([0.0, 0.0, -10.0]))
        monkeypatch.setattr(data, "_sample_pose", lambda rng, cfg: behind)
        with pytest.raises(ConfigError):
            generate_pair(SceneConfig(seed=0))


class TestDataset:
    def test_first_equals_generate(self):
        cfg = SceneConfig(seed=5)
        assert digest(next(dataset(cfg, 1))) == digest(generate_pair(cfg))

    def test_restartable(self):
        cfg = SceneConfig(image_size=(16, 16), seed=2)
        full = [digest(s) for s in dataset(cfg, 6)]
        assert [digest(s) for s in dataset(cfg, 6, start=3)] == full[3:]
        assert digest(pair_at(cfg, 4)) == full[4]

    def test_distinct_images(self):
        cfg = SceneConfig(image_size=(16, 16), seed=0)
        hashes = {hashlib.sha256(s.image_a.tobytes()).hexdigest() for s in dataset(cfg, 300)}
        assert len(hashes) == 300

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            next(dataset(SceneConfig(), 0))


class TestFiles:
    def test_pgm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((8, 16))
        write_pgm(tmp_path / "x.pgm", img)
        back = read_pgm(tmp_path / "x.pgm")
        np.testing.assert_array_equal(to_uint8(back), to_uint8(img))
        assert back.shape == (8, 16)

    def test_pgm_comments(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
        np.testing.assert_array_equal(read_pgm(p), [[0.0, 1.0]])

    @pytest.mark.parametrize("payload", [b"P2\n1 1\n255\n0", b"P5\n4 4\n255\n\x00", b"P5\n1", b"P5\n1 1 0\n\x00"])
    def test_pgm_errors(self, tmp_path, payload):
        p = tmp_path / "bad.pgm"
        p.write_bytes(payload)
        with pytest.raises(PGMError):
            read_pgm(p)

    def test_pgm_missing(self, tmp_path):
        with pytest.raises(PGMError):
            read_pgm(tmp_path / "missing.pgm")

    def test_pgm_rejects_3d(self, tmp_path):
        with pytest.raises(InputShapeError):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 3)))

    def test_export(self, tmp_path):
        s = generate_pair(SceneConfig(seed=3))
        paths = export_sample(s, tmp_path / "out", "p0")
        head = read_sidecar(paths["header"])
        assert head["size"] == (64, 64)
        np.testing.assert_allclose(head["homography"], s.homography, rtol=1e-11)
        np.testing.assert_allclose(head["pose"], s.pose_ab.as_matrix(), rtol=1e-11, atol=1e-14)
        np.testing.assert_allclose(head["intrinsics_a"], s.K_a)
        np.testing.assert_array_equal(to_uint8(read_pgm(paths["image_b"])), to_uint8(s.image_b))
