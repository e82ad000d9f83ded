import math

import numpy as np
import pytest

from slotseg.datagen import (
    DatasetError,
    ObjectSpec,
    SceneSpec,
    SequenceRecord,
    depth_normalize,
    generate_dataset,
    log_depth_stats,
    random_scene_spec,
    read_dataset,
    read_manifest,
    read_sequence,
    render_sequence,
    write_dataset,
)


def _disk(x, y, r, z, vx=0.0, vy=0.0, color=(1.0, 0.0, 0.0)):
    return ObjectSpec(shape="disk", x=x, y=y, vx=vx, vy=vy, radius=r, z=z, color=color)


class TestRenderSequence:
    def test_static_disk_constant_labels(self):
        spec = SceneSpec(objects=(_disk(16, 16, 5, 2.0),))
        frames = render_sequence(spec, 5, 32, 32)
        first = frames[0][2]
        assert first.max() == 1
        for _, _, labels in frames[1:]:
            assert np.array_equal(labels, first)

    def test_overlap_resolved_by_min_z(self):
        near = _disk(14, 16, 6, 1.5, color=(1.0, 0.0, 0.0))
        far = _disk(18, 16, 6, 3.0, color=(0.0, 1.0, 0.0))
        spec = SceneSpec(objects=(near, far))
        rgb, depth, labels = render_sequence(spec, 1, 32, 32)[0]
        # independent min-z oracle: recompute coverage per pixel
        for i in range(32):
            for j in range(32):
                covering = []
                for oid, obj in enumerate(spec.objects, start=1):
                    if (j + 0.5 - obj.x) ** 2 + (i + 0.5 - obj.y) ** 2 <= obj.radius**2:
                        covering.append((obj.z, oid))
                if covering:
                    z, oid = min(covering)
                    assert labels[i, j] == oid
                    assert depth[i, j] == pytest.approx(z)
                else:
                    assert labels[i, j] == 0

    def test_camera_pan_shifts_background(self):
        spec = SceneSpec(
            objects=(_disk(6, 6, 3, 1.0),),
            pan_vx=3.0,
            background="texture",
            background_seed=42,
        )
        frames = render_sequence(spec, 2, 64, 64)
        # compare background rows far away from the object
        a = frames[0][0][32:, :, :]
        b = frames[1][0][32:, :, :]
        errs = [
            float(np.mean((b - np.roll(a, -s, axis=1)) ** 2)) for s in range(8)
        ]
        assert int(np.argmin(errs)) == 3

    def test_labels_consistent_with_rgb(self):
        spec = SceneSpec(objects=(_disk(10, 10, 4, 2.0, color=(0.9, 0.1, 0.1)),))
        rgb, _, labels = render_sequence(spec, 1, 32, 32)[0]
        assert np.allclose(rgb[labels == 1], np.array([0.9, 0.1, 0.1]))

    def test_depth_positive_everywhere(self, rng):
        spec = random_scene_spec(rng, 32, 32, num_objects=(3, 5), pan=True)
        for _, depth, _ in render_sequence(spec, 4, 32, 32):
            assert (depth > 0).all()

    def test_bounce_stays_in_frame(self):
        spec = SceneSpec(objects=(_disk(16, 16, 4, 2.0, vx=7.0, vy=5.0),))
        for _, _, labels in render_sequence(spec, 40, 32, 32):
            assert labels.max() == 1  # object never leaves the frame entirely

    def test_too_many_objects_rejected(self):
        with pytest.raises(ValueError, match="num_objects"):
            SceneSpec(objects=tuple(_disk(5 + i, 5, 2, 1 + i) for i in range(11)))


class TestDepthNormalize:
    def test_midpoint_exact(self):
        mu = 1.7
        raw = math.exp(mu)
        assert depth_normalize(np.array([raw]), mu, 0.8)[0] == pytest.approx(0.5, abs=0)

    def test_spot_value_at_e(self):
        val = depth_normalize(np.array([math.e]), 0.0, 1.0)[0]
        assert val == pytest.approx(1.0 / (1.0 + math.e), abs=1e-12)

    def test_strictly_decreasing_and_open_interval(self):
        raw = np.exp(np.linspace(-6, 6, 10_000))
        d = depth_normalize(raw, 0.3, 1.2)
        assert (np.diff(d) < 0).all()
        assert (d > 0).all() and (d < 1).all()

    def test_limits(self):
        assert depth_normalize(np.array([1e30]), 0.0, 1.0)[0] < 1e-12
        assert depth_normalize(np.array([1e-30]), 0.0, 1.0)[0] > 1 - 1e-12

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="positive"):
            depth_normalize(np.array([0.0]), 0.0, 1.0)
        with pytest.raises(ValueError, match="sigma"):
            depth_normalize(np.array([1.0]), 0.0, 0.0)


def _tiny_records(rng, n=2, t=3, h=32, w=32):
    records = []
    for i in range(n):
        spec = random_scene_spec(rng, h, w, num_objects=(1, 2))
        frames = render_sequence(spec, t, h, w)
        records.append(
            SequenceRecord(
                seq_id=f"seq{i:04d}",
                rgb=np.stack([f[0] for f in frames]),
                raw_depth=np.stack([f[1] for f in frames]),
                labels=np.stack([f[2] for f in frames]),
            )
        )
    return records


class TestDatasetIO:
    def test_round_trip(self, tmp_path, rng):
        records = _tiny_records(rng)
        manifest = write_dataset(tmp_path, {"train": records})
        loaded = list(read_dataset(tmp_path, "train"))
        assert [r.seq_id for r in loaded] == [r.seq_id for r in records]
        for orig, back in zip(records, loaded):
            assert np.abs(orig.rgb - back.rgb).max() <= 1.0 / 255.0 + 1e-9
            assert np.array_equal(orig.raw_depth.astype(np.float32), back.raw_depth)
            assert np.array_equal(orig.labels, back.labels)
        assert manifest.h == 32 and manifest.w == 32 and manifest.t == 3

    def test_manifest_stats_match_recomputation(self, tmp_path, rng):
        records = _tiny_records(rng)
        manifest = write_dataset(tmp_path, {"train": records})
        reread = read_manifest(tmp_path)
        loaded = list(read_dataset(tmp_path, "train"))
        mu, sigma = log_depth_stats([r.raw_depth for r in loaded])
        assert reread.mu == pytest.approx(manifest.mu, abs=0)
        assert mu == pytest.approx(manifest.mu, abs=1e-9)
        assert sigma == pytest.approx(manifest.sigma, abs=1e-9)

    def test_truncated_depth_names_frame(self, tmp_path, rng):
        records = _tiny_records(rng, n=1)
        write_dataset(tmp_path, {"train": records})
        victim = tmp_path / "train" / "seq0000" / "frame_0001.depth.f32"
        victim.write_bytes(victim.read_bytes()[:-10])
        with pytest.raises(DatasetError, match="seq0000 frame 1"):
            read_sequence(tmp_path, "train", "seq0000")

    def test_missing_split_raises(self, tmp_path, rng):
        write_dataset(tmp_path, {"train": _tiny_records(rng, n=1)})
        with pytest.raises(DatasetError, match="split 'test'"):
            list(read_dataset(tmp_path, "test"))

    def test_generate_dataset_deterministic(self, tmp_path):
        m1 = generate_dataset(tmp_path / "a", seed=7, h=32, w=32, num_frames=2,
                              counts={"train": 2})
        m2 = generate_dataset(tmp_path / "b", seed=7, h=32, w=32, num_frames=2,
                              counts={"train": 2})
        assert m1.mu == m2.mu and m1.sigma == m2.sigma
        for seq in ("seq0000", "seq0001"):
            for frame in sorted((tmp_path / "a" / "train" / seq).iterdir()):
                other = tmp_path / "b" / "train" / seq / frame.name
                assert frame.read_bytes() == other.read_bytes()

    def test_min_z_invariant_exhaustive(self, rng):
        # every generated pixel's id equals argmin-z among covering disks
        objs = []
        for _ in range(4):
            r = float(rng.uniform(3, 7))
            objs.append(
                _disk(
                    x=float(rng.uniform(r, 32 - r)),
                    y=float(rng.uniform(r, 32 - r)),
                    r=r,
                    z=float(rng.uniform(1, 5)),
                )
            )
        objs = tuple(objs)
        spec = SceneSpec(objects=objs)
        _, _, labels = render_sequence(spec, 1, 32, 32)[0]
        for i in range(32):
            for j in range(32):
                covering = [
                    (obj.z, oid)
                    for oid, obj in enumerate(objs, start=1)
                    if (j + 0.5 - obj.x) ** 2 + (i + 0.5 - obj.y) ** 2 <= obj.radius**2
                ]
                expected = min(covering)[1] if covering else 0
                assert labels[i, j] == expected
