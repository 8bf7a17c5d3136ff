from __future__ import annotations

import json

import numpy as np
import pytest
import scipy.optimize
import scipy.stats

from mixalign.clustering import build_constraints, cluster_shapes
from mixalign.errors import InvalidArg
from mixalign.geometry import AffineTransform
from mixalign.io import load_corpus, load_image, load_manifest
from mixalign.synthetic import (
    face_layout,
    generate,
    make_benchmark,
    make_synth_model,
    render,
    sample_shape,
)

STILL = dict(rotation_range=0.0, scale_range=(1.0, 1.0), anisotropy=0.0, shear=0.0, translation=0.0)


class TestModel:
    def test_layout_sizes(self):
        assert face_layout().shape == (20, 2)
        assert face_layout(30).shape == (30, 2)
        with pytest.raises(InvalidArg):
            face_layout(5)

    def test_modes_orthonormal_and_pose_free(self):
        m = make_synth_model()
        assert np.allclose(m.modes @ m.modes.T, np.eye(4), atol=1e-12)
        base = face_layout()
        for a in range(2):
            for col in (base[:, 0], base[:, 1], np.ones(20)):
                v = np.zeros((20, 2))
                v[:, a] = col
                assert np.allclose(m.modes @ v.reshape(-1), 0, atol=1e-9)

    def test_identity_pose_reproduces_base(self):
        m = make_synth_model(mode_sigma=0.0, **STILL)
        rng = np.random.default_rng(0)
        shape, k, pose, _ = sample_shape(m, rng, preset=0)
        assert k == 0
        assert pose.allclose(AffineTransform.identity(), atol=1e-12)
        assert np.allclose(shape, m.base_shape, atol=1e-9)

    def test_presets_shift_shape(self):
        m = make_synth_model(mode_sigma=0.0, **STILL)
        for k in range(3):
            shape, *_ = sample_shape(m, np.random.default_rng(0), preset=k)
            assert np.allclose(shape, m.base_shape + m.presets[k], atol=1e-9)

    def test_preset_uniformity(self):
        m = make_synth_model()
        rng = np.random.default_rng(11)
        counts = np.bincount([sample_shape(m, rng)[1] for _ in range(10_000)], minlength=3)
        assert scipy.stats.chisquare(counts).pvalue > 0.001


class TestRender:
    def test_landmarks_stand_out(self):
        m = make_synth_model(mode_sigma=0.0, **STILL)
        img = render(m, m.base_shape, AffineTransform.identity())
        floor = m.background + m.face_contrast + 5 * m.noise_sigma
        for x, y in np.rint(m.base_shape).astype(int):
            assert img[y, x] >= floor

    def test_noise_free_without_rng(self):
        m = make_synth_model()
        a = render(m, m.base_shape, AffineTransform.identity())
        b = render(m, m.base_shape, AffineTransform.identity())
        assert np.array_equal(a, b)
        assert a.shape == (200, 200) and a.min() >= 0 and a.max() <= 1

    def test_preset_changes_appearance(self):
        m = make_synth_model()
        a = render(m, m.base_shape, AffineTransform.identity(), preset=0)
        b = render(m, m.base_shape, AffineTransform.identity(), preset=1)
        assert np.abs(a - b).max() > 0.1

    def test_generate_deterministic(self):
        m = make_synth_model()
        a, b = generate(m, 3, [5, 0]), generate(m, 3, [5, 0])
        for x, y in zip(a, b):
            assert np.array_equal(x.image, y.image) and np.array_equal(x.shape, y.shape) and x.bbox == y.bbox

    def test_bbox_contains_most_landmarks(self):
        inst = generate(make_synth_model(), 50, [1, 0])
        inside = []
        for i in inst:
            l, t, r, b = i.bbox
            inside.append(np.mean((i.shape[:, 0] >= l) & (i.shape[:, 0] <= r)
                                  & (i.shape[:, 1] >= t) & (i.shape[:, 1] <= b)))
        assert np.mean(inside) > 0.95


class TestBenchmarkCorpus:
    def test_round_trip(self, tmp_path):
        m = make_synth_model()
        out = make_benchmark(m, 3, 2, seed=9, out_dir=tmp_path)
        train = load_corpus(out / "train")
        test = load_corpus(out / "test")
        assert len(train) == 3 and len(test) == 2
        ref = generate(m, 3, [9, 0])
        for s, inst in zip(train, ref):
            assert np.allclose(s.shape, inst.shape, atol=1e-6)
            assert np.allclose(s.bbox, inst.bbox, atol=1e-6)
            assert np.abs(load_image(s.image_path) - inst.image).max() <= 0.5 / 255 + 1e-12
        man = load_manifest(out)
        assert man["left_pupil"] == [0, 1, 2, 3]
        assert man["splits"]["train"]["presets"] == [i.preset for i in ref]

    def test_byte_identical(self, tmp_path):
        m = make_synth_model()
        a = make_benchmark(m, 2, 1, seed=3, out_dir=tmp_path / "a")
        b = make_benchmark(m, 2, 1, seed=3, out_dir=tmp_path / "b")
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_empty_train_split(self, tmp_path):
        out = make_benchmark(make_synth_model(), 0, 2, seed=1, out_dir=tmp_path)
        assert load_corpus(out / "train") == []
        assert json.loads((out / "manifest.json").read_text())["splits"]["train"]["count"] == 0

    def test_train_test_disjoint(self):
        m = make_synth_model()
        a, b = generate(m, 2, [4, 0]), generate(m, 2, [4, 1])
        assert not np.allclose(a[0].shape, b[0].shape)


class TestClusteringRecoversPresets:
    def test_recovery(self):
        m = make_synth_model()
        rng = np.random.default_rng(21)
        draws = [sample_shape(m, rng) for _ in range(300)]
        shapes = np.array([d[0] for d in draws])
        labels = np.array([d[1] for d in draws])
        res = cluster_shapes(shapes, 3, build_constraints(shapes, m.constraint_groups), seed=0)
        conf = np.zeros((3, 3), dtype=int)
        np.add.at(conf, (res.assignments, labels), 1)
        row, col = scipy.optimize.linear_sum_assignment(-conf)
        assert conf[row, col].sum() / 300 >= 0.95
