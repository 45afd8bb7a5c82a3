"""Binary and text artifact round-trips, plus malformed-input rejection."""

import struct

import numpy as np
import pytest

from danse import formats
from danse.formats import FormatError


class TestFeatureFile:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = rng.normal(size=(23, 57)).astype(np.float32).astype(np.float64)
        path = tmp_path / "a.fea"
        formats.write_feature_file(path, frames)
        back = formats.read_feature_file(path)
        assert back.dtype == np.float64
        assert np.array_equal(back, frames)

    def test_write_read_write_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        frames = rng.normal(size=(4, 9))
        p1, p2 = tmp_path / "a.fea", tmp_path / "b.fea"
        formats.write_feature_file(p1, frames)
        formats.write_feature_file(p2, formats.read_feature_file(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_layout_is_time_major(self, tmp_path):
        frames = np.array([[1.0, 2.0], [3.0, 4.0]])  # F=2, T=2
        path = tmp_path / "a.fea"
        formats.write_feature_file(path, frames)
        raw = path.read_bytes()
        assert raw[:4] == b"FEA1"
        assert struct.unpack("<II", raw[4:12]) == (2, 2)
        vals = np.frombuffer(raw[12:], dtype="<f4")
        # frame 0 (1,3) then frame 1 (2,4)
        assert vals.tolist() == [1.0, 3.0, 2.0, 4.0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fea"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            formats.read_feature_file(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "t.fea"
        formats.write_feature_file(path, np.ones((3, 5)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError, match="byte"):
            formats.read_feature_file(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.fea"
        formats.write_feature_file(path, np.ones((3, 5)))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            formats.read_feature_file(path)

    def test_degenerate_dims_rejected(self, tmp_path):
        path = tmp_path / "z.fea"
        path.write_bytes(b"FEA1" + struct.pack("<II", 0, 5))
        with pytest.raises(FormatError, match="degenerate"):
            formats.read_feature_file(path)
        with pytest.raises(ValueError):
            formats.write_feature_file(path, np.ones((0, 5)))


class TestEmbeddingFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        records = [(f"rec{i:03d}", rng.normal(size=64).astype(np.float32).astype(np.float64))
                   for i in range(5)]
        path = tmp_path / "e.emb"
        formats.write_embedding_file(path, records)
        back = formats.read_embedding_file(path)
        assert list(back) == [r[0] for r in records]
        for rec_id, vec in records:
            assert np.array_equal(back[rec_id], vec)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.emb"
        formats.write_embedding_file(path, [])
        assert formats.read_embedding_file(path) == {}

    def test_wrong_dimension_rejected_on_write(self, tmp_path):
        with pytest.raises(ValueError, match="64"):
            formats.write_embedding_file(tmp_path / "x.emb", [("a", np.zeros(32))])

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "d.emb"
        formats.write_embedding_file(
            path, [("a", np.zeros(64)), ("b", np.ones(64))]
        )
        raw = bytearray(path.read_bytes())
        # rewrite second id 'b' -> 'a'
        second = raw.index(b"b", 8)
        raw[second] = ord("a")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="duplicate"):
            formats.read_embedding_file(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.emb"
        formats.write_embedding_file(path, [("a", np.zeros(64))])
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError, match="truncated"):
            formats.read_embedding_file(path)

    def test_unicode_ids(self, tmp_path):
        path = tmp_path / "u.emb"
        formats.write_embedding_file(path, [("rec-éß", np.arange(64, dtype=float))])
        back = formats.read_embedding_file(path)
        assert "rec-éß" in back


class TestCheckpoint:
    def tensors(self):
        rng = np.random.default_rng(3)
        return {
            "stem.weight": rng.normal(size=(4, 3, 3)),
            "stem.bias": rng.normal(size=4),
            "scalar": np.array(2.5),
            "fc.weight": rng.normal(size=(8, 2)),
        }

    def test_roundtrip_bit_exact(self, tmp_path):
        tensors = self.tensors()
        path = tmp_path / "m.ckpt"
        formats.write_checkpoint(path, tensors)
        back = formats.read_checkpoint(path)
        assert list(back) == list(tensors)
        for name, arr in tensors.items():
            assert back[name].shape == np.asarray(arr).shape
            assert back[name].tobytes() == np.asarray(arr, dtype=np.float64).tobytes()

    def test_magic_and_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        formats.write_checkpoint(path, self.tensors())
        raw = path.read_bytes()
        assert raw[:4] == b"DNSE"
        assert struct.unpack("<I", raw[4:8])[0] == 1

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        formats.write_checkpoint(path, {"a": np.zeros(2)})
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            formats.read_checkpoint(path)

    def test_order_preserved(self, tmp_path):
        path = tmp_path / "m.ckpt"
        tensors = {"z": np.ones(1), "a": np.zeros(2), "m": np.full(3, 7.0)}
        formats.write_checkpoint(path, tensors)
        assert list(formats.read_checkpoint(path)) == ["z", "a", "m"]

    def test_truncated_data(self, tmp_path):
        path = tmp_path / "m.ckpt"
        formats.write_checkpoint(path, {"w": np.ones((2, 2))})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            formats.read_checkpoint(path)

    def test_scalar_tensor_roundtrip(self, tmp_path):
        path = tmp_path / "s.ckpt"
        formats.write_checkpoint(path, {"k": np.array((-1.25))})
        back = formats.read_checkpoint(path)
        assert back["k"].shape == ()
        assert back["k"] == -1.25


class TestTextArtifacts:
    def test_manifest_roundtrip(self, tmp_path):
        rows = [
            ("src000_r00", "src000", "source", "features/src000_r00.fea"),
            ("ada000_r01", "-", "target", "features/ada000_r01.fea"),
        ]
        path = tmp_path / "manifest.txt"
        formats.write_manifest(path, rows)
        assert formats.read_manifest(path) == rows

    def test_manifest_bad_field_count(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("a b c\n")
        with pytest.raises(FormatError, match="1: expected 4"):
            formats.read_manifest(path)

    def test_manifest_bad_domain(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("a b middle p\n")
        with pytest.raises(FormatError, match="domain"):
            formats.read_manifest(path)

    def test_manifest_rejects_spaces_on_write(self, tmp_path):
        with pytest.raises(ValueError):
            formats.write_manifest(tmp_path / "m.txt", [("a b", "s", "source", "p")])

    def test_trials_roundtrip(self, tmp_path):
        trials = [("e1", "t1", "target"), ("e1", "t2", "nontarget")]
        path = tmp_path / "trials.txt"
        formats.write_trial_list(path, trials)
        assert formats.read_trial_list(path) == trials

    def test_trials_bad_label(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("e t imposter\n")
        with pytest.raises(FormatError, match="label"):
            formats.read_trial_list(path)
        with pytest.raises(ValueError):
            formats.write_trial_list(path, [("e", "t", "yes")])

    def test_scores_roundtrip_six_decimals(self, tmp_path):
        rows = [("e1", "t1", 0.123456789), ("e2", "t2", -1.0)]
        path = tmp_path / "scores.txt"
        formats.write_score_file(path, rows)
        text = path.read_text()
        assert "0.123457" in text and "-1.000000" in text
        back = formats.read_score_file(path)
        assert back[0][2] == 0.123457
        assert back[1] == ("e2", "t2", -1.0)

    def test_scores_bad_value(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("e t notanumber\n")
        with pytest.raises(FormatError, match="score"):
            formats.read_score_file(path)

    def test_log_line_roundtrip(self):
        line = formats.format_log_line(3, 1.5, 0.25, 0.101, 0.001, 0.003, 0.001)
        assert line == "3 1.500000 0.250000 0.101000 0.001000 0.003000 0.001000"
        epoch, vals = formats.parse_log_line(line, 1)
        assert epoch == 3
        assert vals == [1.5, 0.25, 0.101, 0.001, 0.003, 0.001]

    def test_log_line_bad_column_count(self):
        with pytest.raises(FormatError, match="7 columns"):
            formats.parse_log_line("1 2 3", 4, "log.txt")

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("\ne1 t1 target\n\n")
        assert formats.read_trial_list(path) == [("e1", "t1", "target")]
