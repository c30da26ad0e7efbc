import numpy as np
import pytest

from crossing_attn import render
from crossing_attn.dataset import (
    MANIFEST_HEADER,
    DataError,
    ManifestEntry,
    Record,
    SceneParams,
    SequenceParams,
    SequenceSample,
    generate_scene,
    generate_sequence,
    mirror_class,
    mirror_motion,
    mirror_sequence,
    read_manifest,
    scene_corpus,
    slice_approach,
    split_and_filter,
    time_clusters,
    write_manifest,
)
from crossing_attn.flow import compute_flow
from crossing_attn.imageio import to_gray, write_pnm


class FlatNoise:
    def __call__(self, x, z, scale=1.0):
        return np.full(np.shape(x), 0.5)


def flat_view(arms, lateral=0.0, yaw=0.0):
    palette = render.random_palette(np.random.default_rng(0), 0.0)
    return render.render_view(size=(32, 48), cam_pos=(lateral, 5.0, -3.0), yaw_deg=yaw, pitch_deg=35.0,
                              hfov_deg=100.0, arms=arms, road_width=7.0, noise=FlatNoise(), palette=palette)


class TestScenes:
    def test_crossroad_geometry_is_mirror_symmetric(self):
        img = flat_view(render.CLASS_ARMS[7])
        np.testing.assert_allclose(img, img[:, ::-1], atol=1e-12)

    def test_textured_crossroad_close_to_mirror(self):
        p = SceneParams(viewpoint_jitter=0, occluders=0, pixel_noise=0)
        img = generate_scene(7, 3, p).image
        # only the ground and skyline textures break the symmetry
        assert np.abs(img - img[:, ::-1]).mean() < 0.05

    @pytest.mark.parametrize("a, b", [(2, 3), (4, 5)])
    def test_topology_duality(self, a, b):
        np.testing.assert_allclose(flat_view(render.CLASS_ARMS[a])[:, ::-1], flat_view(render.CLASS_ARMS[b]), atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_generator_mirror_duality(self, seed):
        for a in (2, 4):
            b = mirror_class(a)
            np.testing.assert_array_equal(generate_scene(a, seed).image[:, ::-1], generate_scene(b, seed).image)

    def test_mirror_rule(self):
        assert [mirror_class(c) for c in range(1, 8)] == [1, 3, 2, 5, 4, 6, 7]
        assert [mirror_motion(m) for m in (1, 2, 3)] == [1, 3, 2]

    def test_deterministic(self):
        a = generate_scene(5, 42).image
        b = generate_scene(5, 42).image
        assert a.tobytes() == b.tobytes()
        assert generate_scene(5, 43).image.tobytes() != a.tobytes()

    def test_shape_and_range(self):
        img = generate_scene(1, 0).image
        assert img.shape == (64, 64, 3) and img.min() >= 0 and img.max() <= 1

    def test_viewpoint_in_approach_band(self):
        for s in range(20):
            d = generate_scene(6, s).viewpoint["distance_m"]
            assert -5 <= d <= 0

    def test_corpus_balanced(self):
        imgs, labels = scene_corpus(2, seed=0, params=SceneParams(size=(16, 16)))
        assert imgs.shape == (14, 16, 16, 3)
        assert np.bincount(labels).tolist() == [0] + [2] * 7

    def test_bad_label(self):
        with pytest.raises(ValueError):
            generate_scene(8, 0)


class TestSequences:
    params = SequenceParams(size=(48, 64), n_frames=4)

    def test_zero_speed_identical_frames(self):
        seq = generate_sequence(2, 0, self.params, speed=0.0)
        for f in seq.frames[1:]:
            assert f.tobytes() == seq.frames[0].tobytes()

    def test_deterministic(self):
        a, b = generate_sequence(3, 9, self.params), generate_sequence(3, 9, self.params)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames, b.frames))

    def test_track_strictly_increasing(self):
        seq = generate_sequence(1, 1, self.params)
        seq.validate_track()
        assert len(seq.frames) == len(seq.pose_track) == 4

    def test_flow_sign_matches_turn(self):
        mean_u = {}
        for motion in (1, 2, 3):
            us = []
            for seed in range(3):
                seq = generate_sequence(motion, seed, self.params)
                us.append(np.mean([compute_flow(to_gray(a), to_gray(b))[..., 0].mean()
                                   for a, b in zip(seq.frames[:-1], seq.frames[1:])]))
            mean_u[motion] = np.mean(us)
        assert mean_u[2] < -0.3 < 0.3 < mean_u[3]
        assert abs(mean_u[1]) < 0.5 * min(abs(mean_u[2]), abs(mean_u[3]))

    def test_mirror_sequence_labels(self):
        m = mirror_sequence(generate_sequence(2, 0, self.params))
        assert m.motion_label == 3 and m.intersection_label == 7

    def test_default_length(self):
        assert SequenceParams().n_frames >= 10


class TestSlicing:
    def seq(self, track):
        return SequenceSample(frames=[np.zeros((2, 2))] * len(track), pose_track=np.asarray(track, float),
                              motion_label=1, intersection_label=1)

    def test_window(self):
        s = slice_approach(self.seq([-10, -7, -4, -2, -0.5, 1]), 0, 5)
        assert s.distances.tolist() == [-4, -2, -0.5] and s.indices == [2, 3, 4]

    def test_unbounded(self):
        s = slice_approach(self.seq([-10, -7, -4, -2, -0.5, 1]), 0, 1e9)
        assert s.distances.tolist() == [-10, -7, -4, -2, -0.5]

    def test_empty_flagged(self):
        s = slice_approach(self.seq([0.5, 1, 2]))
        assert s.empty and s.frames == []

    def test_bad_window(self):
        with pytest.raises(ValueError):
            slice_approach(self.seq([-1.0]), 5, 5)

    def test_within_bounds_property(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            track = np.sort(rng.uniform(-20, 5, 15))
            l1 = rng.uniform(0, 3)
            l2 = l1 + rng.uniform(0.1, 10)
            s = slice_approach(self.seq(track), l1, l2)
            assert np.all((s.distances >= -l2) & (s.distances <= -l1))
            assert len(s.indices) == int(np.sum((track >= -l2) & (track <= -l1)))


def records(sizes, label=1, start=0.0):
    out, t = [], start
    for n in sizes:
        out.extend(Record(label, t + i * 0.5) for i in range(n))
        t += n * 0.5 + 10
    return out


class TestSplit:
    def test_cluster_filter(self):
        recs = records([7, 4, 6])
        assert [len(c) for c in time_clusters(recs)] == [7, 4, 6]
        split = split_and_filter(recs, seed=0)
        assert len(split.excluded) == 4
        assert not set(split.excluded) & set(split.train + split.test)

    def test_paper_ratio_counts(self):
        recs = [r for lab in range(1, 8) for r in records([162 // 7 + (lab <= 162 % 7)], label=lab, start=lab * 1e4)]
        assert len(recs) == 162
        train, test = split_and_filter(recs, seed=1)
        assert (len(train), len(test)) == (126, 36)

    def test_stratified(self):
        recs = [r for lab in (1, 2, 3) for r in records([30 + 10 * lab], label=lab, start=lab * 1e4)]
        split = split_and_filter(recs, seed=4)
        frac = len(split.train) / len(recs)
        for lab in (1, 2, 3):
            n = sum(r.label == lab for r in recs)
            assert abs(sum(r.label == lab for r in split.train) - frac * n) <= 1

    def test_seeded(self):
        recs = records([10, 12])
        a, b = split_and_filter(recs, seed=3), split_and_filter(recs, seed=3)
        assert a.train == b.train and a.test == b.test

    def test_class_without_train_rejected(self):
        recs = records([10], label=1) + records([3], label=2, start=1e4)
        with pytest.raises(DataError, match="class 2"):
            split_and_filter(recs)


class TestManifest:
    def make(self, tmp_path, n=3):
        paths = []
        for i in range(n):
            p = tmp_path / f"f{i}.pgm"
            write_pnm(p, np.full((4, 5), i / 4))
            paths.append(p)
        return ManifestEntry("seq0", paths, np.array([-3.0, -2.0, -1.0][:n]), 2, 4, "train")

    def test_roundtrip(self, tmp_path):
        entry = self.make(tmp_path)
        write_manifest(tmp_path / "m.csv", [entry])
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(MANIFEST_HEADER)
        (back,) = read_manifest(tmp_path / "m.csv")
        assert back.frame_paths == entry.frame_paths and back.distances.tolist() == [-3, -2, -1]
        seq = back.load()
        assert seq.motion_label == 2 and len(seq.frames) == 3

    def test_missing_frame(self, tmp_path):
        entry = self.make(tmp_path)
        write_manifest(tmp_path / "m.csv", [entry])
        entry.frame_paths[1].unlink()
        with pytest.raises(DataError, match="f1.pgm"):
            read_manifest(tmp_path / "m.csv")

    def test_non_monotone(self, tmp_path):
        entry = self.make(tmp_path)
        entry.distances = np.array([-1.0, -2.0, -3.0])
        write_manifest(tmp_path / "m.csv", [entry])
        with pytest.raises(DataError, match="increasing"):
            read_manifest(tmp_path / "m.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n")
        with pytest.raises(DataError, match="header"):
            read_manifest(tmp_path / "m.csv")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            read_manifest(tmp_path / "nope.csv")
