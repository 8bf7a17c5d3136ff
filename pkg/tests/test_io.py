from __future__ import annotations

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixalign.cascade import Expert, MixModel
from mixalign.errors import CorruptModel, InvalidArg, MismatchedCount, ParseError, UnsupportedFormat, VersionMismatch
from mixalign.features import DescriptorParams
from mixalign.io import (
    MODEL_MAGIC,
    decode_model,
    decode_pgm,
    default_pupils,
    encode_model,
    encode_pgm,
    format_pts,
    load_bbox,
    load_corpus,
    load_model,
    load_pts,
    models_equal,
    parse_bbox,
    parse_config,
    parse_groups,
    parse_pts,
    save_model,
    train_config_from_dict,
    format_train_config,
    write_bbox,
    write_pgm,
    write_pts,
)
from mixalign.regression import RegressionStage
from mixalign.training import TrainConfig

SMALL = DescriptorParams(patch_cells=2, orientation_bins=4, patch_radius=4)


def _model(rng, n_experts=2, n_stages=2, p=5, lam=0.5):
    F = p * SMALL.dim + (2 * p if lam > 0 else 0)
    experts = [
        Expert(rng.normal(size=(p, 2)) * 10 + 30,
               [RegressionStage(rng.normal(size=(2 * p, F)), rng.normal(size=2 * p), gamma=10.0**k, lam=lam)
                for k in range(n_stages)])
        for _ in range(n_experts)
    ]
    return MixModel(experts, SMALL, rng.normal(size=(p, 2)), lam=lam, gating_temperature=3.0,
                    frame_size=(61, 61), frame_scale=17.5, bbox_scale=0.8, config_text="M = 6\n")


PTS = "version: 1\nn_points: 3\n{\n1 1\n10.5 20\n3 4\n}\n"


class TestPts:
    def test_parse_converts_to_zero_based(self):
        assert np.array_equal(parse_pts(PTS), [[0.0, 0.0], [9.5, 19.0], [2.0, 3.0]])

    def test_blank_lines_tolerated(self):
        assert parse_pts("\n" + PTS.replace("{\n", "{\n\n")).shape == (3, 2)

    def test_count_mismatch(self):
        with pytest.raises(MismatchedCount):
            parse_pts(PTS.replace("n_points: 3", "n_points: 4"))

    @pytest.mark.parametrize("bad, line", [
        ("n_points: 3\n{\n}\n", 1),
        ("version: 1\nn_points: x\n{\n}\n", 2),
        ("version: 1\nn_points: 1\n1 2\n}\n", 3),
        ("version: 1\nn_points: 1\n{\n1 2 3\n}\n", 4),
        ("version: 1\nn_points: 1\n{\n1 a\n}\n", 4),
    ])
    def test_parse_errors_report_line(self, bad, line):
        with pytest.raises(ParseError) as exc:
            parse_pts(bad, "f.pts")
        assert exc.value.line == line
        assert "f.pts" in str(exc.value)

    def test_missing_close(self):
        with pytest.raises(ParseError):
            parse_pts("version: 1\nn_points: 1\n{\n1 2\n")

    @given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=1, max_size=30))
    def test_round_trip(self, pts):
        s = np.array(pts)
        assert np.allclose(parse_pts(format_pts(s)), s, atol=1e-6)

    def test_file_round_trip(self, tmp_path, rng):
        s = rng.normal(size=(7, 2)) * 50
        write_pts(tmp_path / "a.pts", s)
        assert np.allclose(load_pts(tmp_path / "a.pts"), s, atol=1e-6)
        assert not list(tmp_path.glob("*.tmp"))


class TestPgm:
    def test_2x2_example(self):
        img = decode_pgm(b"P5\n2 2\n255\n" + bytes([0, 255, 51, 102]))
        assert np.allclose(img, [[0.0, 1.0], [0.2, 0.4]])

    def test_comments_and_16bit(self):
        data = b"P5 # comment\n1 2\n# more\n65535\n" + struct.pack(">2H", 0, 65535)
        assert np.allclose(decode_pgm(data), [[0.0], [1.0]])

    def test_unsupported(self):
        with pytest.raises(UnsupportedFormat):
            decode_pgm(b"P2\n1 1\n255\n0\n")
        with pytest.raises(UnsupportedFormat):
            decode_pgm(b"\x89PNG....")

    def test_truncated(self):
        with pytest.raises(ParseError):
            decode_pgm(b"P5\n2 2\n255\n" + bytes([0, 1]))
        with pytest.raises(ParseError):
            decode_pgm(b"P5\n2")

    def test_round_trip_quantized(self, tmp_path, rng):
        img = rng.random((9, 13))
        write_pgm(tmp_path / "x.pgm", img)
        back = decode_pgm((tmp_path / "x.pgm").read_bytes())
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_deterministic_bytes(self, rng):
        img = rng.random((4, 4))
        assert encode_pgm(img) == encode_pgm(img.copy())


class TestBbox:
    def test_parse(self):
        assert parse_bbox("1 2 3 4\n") == (1.0, 2.0, 3.0, 4.0)
        assert parse_bbox("1,2,3,4") == (1.0, 2.0, 3.0, 4.0)

    def test_errors(self):
        with pytest.raises(ParseError):
            parse_bbox("1 2 3")
        with pytest.raises(ParseError):
            parse_bbox("1 2 3 x")

    def test_round_trip(self, tmp_path):
        write_bbox(tmp_path / "b.bbox", (1.25, 2.5, 30.0, 40.75))
        assert load_bbox(tmp_path / "b.bbox") == (1.25, 2.5, 30.0, 40.75)


class TestCorpus:
    def test_load_sorted(self, tmp_path, rng):
        for stem in ("b", "a"):
            write_pgm(tmp_path / f"{stem}.pgm", rng.random((5, 5)))
            write_pts(tmp_path / f"{stem}.pts", rng.random((3, 2)))
        write_bbox(tmp_path / "a.bbox", (0, 0, 4, 4))
        out = load_corpus(tmp_path)
        assert [s.image_path.stem for s in out] == ["a", "b"]
        assert out[0].bbox == (0, 0, 4, 4) and out[1].bbox is None

    def test_missing_image(self, tmp_path, rng):
        write_pts(tmp_path / "a.pts", rng.random((3, 2)))
        with pytest.raises(InvalidArg):
            load_corpus(tmp_path)

    def test_default_pupils(self):
        assert default_pupils(68) == (list(range(36, 42)), list(range(42, 48)))
        assert default_pupils(7, {"left_pupil": [0], "right_pupil": [1]}) == ([0], [1])
        with pytest.raises(InvalidArg):
            default_pupils(7)


class TestConfig:
    def test_parse(self):
        assert parse_config("a = 1  # c\n\n# x\nb=two\n") == {"a": "1", "b": "two"}

    def test_parse_errors(self):
        with pytest.raises(ParseError) as exc:
            parse_config("a = 1\nnonsense\n")
        assert exc.value.line == 2
        with pytest.raises(ParseError):
            parse_config("a = 1\na = 2\n")

    def test_groups(self):
        assert parse_groups("8,9,10:xy; 16 17:y") == [([8, 9, 10], "xy"), ([16, 17], "y")]
        with pytest.raises(InvalidArg):
            parse_groups("1,2:z")

    def test_train_config(self):
        cfg = train_config_from_dict({"M": "6", "lam": "2.5", "patch_radius": "8", "gamma_grid": "0.1, 1",
                                      "constraint_groups": "0,1:xy; 2:y", "cross_fit": "false"})
        assert cfg.M == 6 and cfg.lam == 2.5 and cfg.descriptor.patch_radius == 8
        assert cfg.gamma_grid == (0.1, 1.0) and cfg.constraint_groups == [([0, 1], "xy"), ([2], "y")]
        assert cfg.cross_fit is False
        with pytest.raises(InvalidArg):
            train_config_from_dict({"nope": "1"})
        with pytest.raises(InvalidArg):
            train_config_from_dict({"M": "six"})

    def test_format_round_trip(self):
        cfg = TrainConfig(M=7, lam=1.5, constraint_groups=[([0, 1], "xy"), ([2], "y")])
        back = train_config_from_dict(parse_config(format_train_config(cfg)))
        assert back == cfg


class TestModelFile:
    def test_round_trip(self, tmp_path, rng):
        m = _model(rng)
        save_model(tmp_path / "m.bin", m)
        assert models_equal(load_model(tmp_path / "m.bin"), m)

    def test_round_trip_plain(self, rng):
        m = _model(rng, n_experts=1, n_stages=0, lam=0.0)
        assert models_equal(decode_model(encode_model(m)), m)

    def test_deterministic_bytes(self, rng):
        m = _model(rng)
        assert encode_model(m) == encode_model(m)

    def test_truncated(self, rng):
        data = encode_model(_model(rng))
        for cut in (4, 12, len(data) // 2, len(data) - 1):
            with pytest.raises(CorruptModel):
                decode_model(data[:cut])

    def test_bit_flip(self, rng):
        data = bytearray(encode_model(_model(rng)))
        data[len(data) // 2] ^= 0x01
        with pytest.raises(CorruptModel):
            decode_model(bytes(data))

    def test_version_bump(self, rng):
        data = bytearray(encode_model(_model(rng)))
        data[len(MODEL_MAGIC) : len(MODEL_MAGIC) + 4] = struct.pack("<I", 2)
        body = bytes(data[:-4])
        with pytest.raises(VersionMismatch) as exc:
            decode_model(body + struct.pack("<I", zlib.crc32(body)))
        assert exc.value.found == 2 and exc.value.supported == 1

    def test_bad_magic(self):
        with pytest.raises(CorruptModel):
            decode_model(b"NOTAMODEL" + bytes(20))

    def test_inconsistent_payload(self, rng):
        # valid checksum around a payload whose feature mode disagrees with lam
        data = encode_model(_model(rng, lam=0.0, n_stages=0))
        body = data[:-4].replace(b"plain", b"xxxxx")
        with pytest.raises(CorruptModel):
            decode_model(body + struct.pack("<I", zlib.crc32(body)))
