import json

import numpy as np
import pytest

from cloudreg.datagen import (PRESETS, SHAPES, NoiseSpec, PairSpec, _crop, derive_seed,
                              generate_dataset, make_pair, preset_spec, read_manifest,
                              synth_shapes)
from cloudreg.geometry import ParameterError, rotation_angle_error
from cloudreg.pose import kabsch


class TestShapes:
    def test_plane(self):
        assert np.all(synth_shapes("plane", 100, 0).points[:, 2] == 0)

    def test_sphere(self):
        r = np.linalg.norm(synth_shapes("sphere", 1000, 0).points, axis=1)
        assert np.abs(r - 1).max() < 1e-9

    @pytest.mark.parametrize("kind", SHAPES)
    def test_deterministic(self, kind):
        assert np.array_equal(synth_shapes(kind, 200, 5).points, synth_shapes(kind, 200, 5).points)
        assert not np.array_equal(synth_shapes(kind, 200, 5).points, synth_shapes(kind, 200, 6).points)

    def test_errors(self):
        with pytest.raises(ParameterError):
            synth_shapes("cone", 100)
        with pytest.raises(ParameterError):
            synth_shapes("plane", 7)


class TestMakePair:
    def test_identity_range_is_permutation(self):
        src = synth_shapes("composite", 200, 1)
        pair = make_pair(src, PairSpec(n_points=200, rot_range_deg=(0, 0), trans_range_m=(0, 0), seed=3))
        s2t = pair.gt.source_to_target
        assert sorted(s2t.tolist()) == list(range(200))
        np.testing.assert_array_equal(pair.Y.points[s2t], pair.X.points)

    def test_unit_sphere(self):
        pair = make_pair(synth_shapes("torus", 500, 2), PairSpec(n_points=300, seed=1))
        c = pair.X.points - pair.X.points.mean(0)
        assert np.abs(pair.X.points.mean(0)).max() < 1e-12
        assert np.linalg.norm(c, axis=1).max() == pytest.approx(1.0)

    def test_transform_ranges(self):
        from cloudreg.geometry import matrix_to_euler
        for seed in range(30):
            pair = make_pair(synth_shapes("box", 64, seed), PairSpec(n_points=64, seed=seed))
            angles, _ = matrix_to_euler(pair.T_gt.rotation)
            assert np.all(angles >= -1e-9) and np.all(angles <= 45 + 1e-9)
            assert np.all(pair.T_gt.translation >= 0) and np.all(pair.T_gt.translation <= 0.5)

    def test_kabsch_recovers_ground_truth(self):
        for seed in range(5):
            spec = PairSpec(n_points=256, crop_keep=192, seed=seed)
            pair = make_pair(synth_shapes("composite", 256, seed), spec)
            pairs = pair.gt.pairs()
            est = kabsch(pair.X.points[pairs[:, 0]], pair.Y.points[pairs[:, 1]])
            assert rotation_angle_error(est.rotation, pair.T_gt.rotation) < 1e-8 * 180 / np.pi
            assert np.abs(est.translation - pair.T_gt.translation).max() < 1e-8

    def test_crop_sizes_and_matches(self):
        spec = preset_spec("partial", seed=4)
        pair = make_pair(synth_shapes("composite", 1024, 4), spec)
        assert len(pair.X) == len(pair.Y) == 768
        pairs = pair.gt.pairs()
        residual = pair.T_gt.apply(pair.X.points[pairs[:, 0]]) - pair.Y.points[pairs[:, 1]]
        assert np.abs(residual).max() < 1e-12
        assert 0 < len(pairs) < 768

    def test_crop_keeps_nearest(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(100, 3))
        kept = _crop(pts, 30, np.random.default_rng(1))
        anchor = pts[np.random.default_rng(1).integers(100)]
        d = np.linalg.norm(pts - anchor, axis=1)
        dropped = np.setdiff1d(np.arange(100), kept)
        assert len(kept) == 30 and d[kept].max() <= d[dropped].min()

    def test_noise_is_clipped(self):
        spec = PairSpec(n_points=500, rot_range_deg=(0, 0), trans_range_m=(0, 0),
                        noise=NoiseSpec(0.1, 0.05), seed=2)
        pair = make_pair(synth_shapes("sphere", 500, 2), spec)
        clean = make_pair(synth_shapes("sphere", 500, 2), PairSpec(n_points=500, rot_range_deg=(0, 0),
                                                                   trans_range_m=(0, 0), seed=2))
        dx = pair.X.points - clean.X.points
        assert np.abs(dx).max() <= 0.05 + 1e-12
        # sigma 0.1 against clip 0.05 puts most coordinates on the clip boundary
        assert np.mean(np.isclose(np.abs(dx), 0.05, rtol=0, atol=1e-12)) > 0.5

    def test_protocol_defaults(self):
        assert PRESETS["partial"]["crop_keep"] == 768 and PRESETS["partial"]["n_points"] == 1024
        noise = PRESETS["partial-noisy"]["noise"]
        assert noise.sigma ** 2 == pytest.approx(0.01) and noise.clip == 0.05
        spec = PairSpec()
        assert spec.rot_range_deg == (0.0, 45.0) and spec.trans_range_m == (0.0, 0.5)

    def test_errors(self):
        with pytest.raises(ParameterError):
            make_pair(synth_shapes("sphere", 50, 0), PairSpec(n_points=64))
        with pytest.raises(ParameterError):
            PairSpec(n_points=10, crop_keep=20)
        with pytest.raises(ParameterError):
            PairSpec(noise=NoiseSpec(-1.0, 0.05))
        with pytest.raises(ParameterError):
            preset_spec("huge")


class TestDataset:
    def test_derive_seed(self):
        assert derive_seed(0, 1) == derive_seed(0, 1)
        assert len({derive_seed(0, k) for k in range(1000)}) == 1000
        assert 0 <= derive_seed(7, 3) < 2 ** 63

    def test_round_trip(self, tmp_path):
        spec = preset_spec("toy", seed=9, crop_keep=48)
        manifest = generate_dataset(tmp_path, 3, spec)
        records = [json.loads(line) for line in manifest.read_text().splitlines()]
        assert [r["pair_id"] for r in records] == ["pair_00000", "pair_00001", "pair_00002"]
        assert len(records[0]["rotation"]) == 9 and len(records[0]["translation"]) == 3
        loaded = read_manifest(manifest)
        for k, (pid, pair) in enumerate(loaded):
            ref = make_pair(synth_shapes("composite", 64, derive_seed(9, k)),
                            PairSpec(n_points=64, crop_keep=48, seed=derive_seed(9, k)))
            assert np.array_equal(pair.X.points, ref.X.points)
            assert np.array_equal(pair.T_gt.rotation, ref.T_gt.rotation)
            assert np.array_equal(pair.gt.source_to_target, ref.gt.source_to_target)

    def test_reproducible_bytes(self, tmp_path):
        spec = preset_spec("toy", seed=1)
        a = generate_dataset(tmp_path / "a", 2, spec)
        b = generate_dataset(tmp_path / "b", 2, spec)
        assert a.read_bytes() == b.read_bytes()
        assert (a.parent / "pair_00001_y.xyz").read_bytes() == (b.parent / "pair_00001_y.xyz").read_bytes()

    def test_bad_manifest(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text('{"pair_id": "p"}\n')
        with pytest.raises(ValueError, match="manifest.jsonl:1"):
            read_manifest(path)
