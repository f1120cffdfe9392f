import json

import numpy as np
import pytest

from articulate.ema import (
    EmaRecording,
    PhoneClass,
    PhoneClassTable,
    RigidTransform,
    Segment,
    Segmentation,
    align_to_reference,
    interpolate_invalid,
    load_recording,
    load_recording_csv,
    parse_labels,
    phone_class,
    save_recording,
    select_channels,
)
from articulate.errors import DataError, FormatError


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def minimal_doc(**kw):
    doc = {
        "utterance": "u01",
        "frameRate": 200.0,
        "channels": {"T1": {"position": [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]}},
    }
    doc.update(kw)
    return doc


class TestLoadRecording:
    def test_minimal(self, tmp_path):
        rec = load_recording(write_json(tmp_path / "r.json", minimal_doc()))
        assert rec.n_frames == 2
        assert rec.frame_rate == 200.0
        assert np.array_equal(rec.channels["T1"][1], [4.0, 5.0, 6.0])

    def test_mixed_lengths(self, tmp_path):
        doc = minimal_doc()
        doc["channels"]["T2"] = {"position": [[0.0, 0.0, 0.0]]}
        with pytest.raises(DataError):
            load_recording(write_json(tmp_path / "r.json", doc))

    def test_missing_frame_rate(self, tmp_path):
        doc = minimal_doc()
        del doc["frameRate"]
        with pytest.raises(FormatError) as exc:
            load_recording(write_json(tmp_path / "r.json", doc))
        assert "frameRate" in str(exc.value)

    def test_nulls_preserved_then_interpolated(self, tmp_path):
        doc = minimal_doc()
        doc["channels"]["T1"]["position"] = [[1.0, 0.0, 0.0], None, [3.0, 0.0, 0.0]]
        rec = load_recording(write_json(tmp_path / "r.json", doc))
        assert np.isnan(rec.channels["T1"][1]).all()
        filled = interpolate_invalid(rec)
        assert np.array_equal(filled.channels["T1"][1], [2.0, 0.0, 0.0])

    def test_single_null_coordinate(self, tmp_path):
        doc = minimal_doc()
        doc["channels"]["T1"]["position"] = [[1.0, None, 0.0], [3.0, 8.0, 0.0]]
        rec = load_recording(write_json(tmp_path / "r.json", doc))
        assert np.isnan(rec.channels["T1"][0, 1])
        assert rec.channels["T1"][0, 0] == 1.0

    def test_round_trip(self, tmp_path):
        doc = minimal_doc(rms={"T1": [0.5, None]})
        rec = load_recording(write_json(tmp_path / "a.json", doc))
        save_recording(rec, tmp_path / "b.json")
        back = load_recording(tmp_path / "b.json")
        assert np.array_equal(back.channels["T1"], rec.channels["T1"])
        assert np.isnan(back.rms["T1"][1])


class TestCsvImport:
    def test_basic(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("T1_x,T1_y,T1_z\n1.0,2.0,3.0\n,,\n7.0,8.0,9.0\n")
        rec = load_recording_csv(p, frame_rate=100.0)
        assert rec.n_frames == 3
        assert np.isnan(rec.channels["T1"][1]).all()

    def test_missing_axis(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("T1_x,T1_y\n1.0,2.0\n")
        with pytest.raises(FormatError):
            load_recording_csv(p, frame_rate=100.0)


class TestInterpolate:
    def test_midpoint(self):
        rec = EmaRecording("u", 100.0, {"c": [[1, 0, 0], [np.nan] * 3, [3, 0, 0]]})
        out = interpolate_invalid(rec)
        assert np.array_equal(out.channels["c"][1], [2.0, 0.0, 0.0])

    def test_edge_extension(self):
        rec = EmaRecording(
            "u", 100.0, {"c": [[np.nan] * 3, [np.nan] * 3, [5.0, 1.0, 2.0]]}
        )
        out = interpolate_invalid(rec)
        assert np.array_equal(out.channels["c"][0], [5.0, 1.0, 2.0])
        assert np.array_equal(out.channels["c"][1], [5.0, 1.0, 2.0])

    def test_ramp_restored_exactly(self):
        rng = np.random.default_rng(0)
        t = np.arange(50.0)
        ramp = np.stack([2.0 * t, -t, 0.5 * t], axis=1)
        holes = ramp.copy()
        # interior deletions only, so linear interpolation is exact
        for idx in rng.choice(np.arange(1, 49), size=15, replace=False):
            holes[idx] = np.nan
        out = interpolate_invalid(EmaRecording("u", 100.0, {"c": holes}))
        assert np.allclose(out.channels["c"], ramp, atol=1e-12)

    def test_valid_samples_untouched_bitwise(self):
        rng = np.random.default_rng(1)
        arr = rng.standard_normal((30, 3))
        holes = arr.copy()
        holes[3] = np.nan
        out = interpolate_invalid(EmaRecording("u", 100.0, {"c": holes}))
        mask = np.ones(30, dtype=bool)
        mask[3] = False
        assert np.array_equal(out.channels["c"][mask], arr[mask])

    def test_idempotent(self):
        rec = EmaRecording("u", 100.0, {"c": [[1, 0, 0], [np.nan] * 3, [3, 0, 0]]})
        once = interpolate_invalid(rec)
        twice = interpolate_invalid(once)
        assert np.array_equal(once.channels["c"], twice.channels["c"])

    def test_all_invalid_channel(self):
        rec = EmaRecording("u", 100.0, {"bad": np.full((4, 3), np.nan)})
        with pytest.raises(DataError) as exc:
            interpolate_invalid(rec)
        assert "bad" in str(exc.value)


class TestAlign:
    def test_constant_reference_shift(self):
        rec = EmaRecording(
            "u", 100.0,
            {"ref": np.tile([10.0, 0.0, 0.0], (3, 1)),
             "T1": np.tile([11.0, 1.0, 0.0], (3, 1))},
        )
        out = align_to_reference(rec, "ref")
        assert np.allclose(out.channels["ref"], 0.0)
        assert np.allclose(out.channels["T1"], [1.0, 1.0, 0.0])

    def test_reference_mean_exactly_zero(self):
        rng = np.random.default_rng(2)
        rec = EmaRecording("u", 100.0, {"ref": rng.uniform(-5, 5, (40, 3)),
                                        "T1": rng.uniform(-5, 5, (40, 3))})
        out = align_to_reference(rec, "ref")
        assert np.abs(out.channels["ref"].mean(axis=0)).max() <= 1e-12

    def test_rigid_preserves_intercoil_distances(self):
        rng = np.random.default_rng(3)
        rec = EmaRecording("u", 100.0, {"ref": rng.uniform(-5, 5, (10, 3)),
                                        "T1": rng.uniform(-5, 5, (10, 3))})
        angle = 0.3
        rot = np.array([[np.cos(angle), -np.sin(angle), 0],
                        [np.sin(angle), np.cos(angle), 0],
                        [0, 0, 1.0]])
        out = align_to_reference(rec, "ref", RigidTransform(rotation=rot))
        before = np.linalg.norm(rec.channels["ref"] - rec.channels["T1"], axis=1)
        after = np.linalg.norm(out.channels["ref"] - out.channels["T1"], axis=1)
        assert np.allclose(before, after, atol=1e-10)

    def test_transform_invertible(self):
        rng = np.random.default_rng(4)
        rec = EmaRecording("u", 100.0, {"ref": rng.uniform(-5, 5, (10, 3))})
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        tf = RigidTransform(rotation=rot, scale=2.0)
        translated = align_to_reference(rec, "ref")
        transformed = align_to_reference(rec, "ref", tf)
        back = tf.invert(transformed.channels["ref"])
        assert np.abs(back - translated.channels["ref"]).max() <= 1e-10

    def test_missing_reference(self):
        rec = EmaRecording("u", 100.0, {"T1": np.zeros((2, 3))})
        with pytest.raises(DataError):
            align_to_reference(rec, "ref")


class TestSelectChannels:
    def test_subset_in_order(self):
        chans = {l: np.full((2, 3), i, dtype=float)
                 for i, l in enumerate(["ref", "T1", "T2", "T3", "jaw"])}
        rec = EmaRecording("u", 200.0, chans)
        out = select_channels(rec, ["T1", "T2", "T3"])
        assert list(out.channels) == ["T1", "T2", "T3"]

    def test_unknown_label(self):
        rec = EmaRecording("u", 200.0, {"T1": np.zeros((2, 3))})
        with pytest.raises(DataError):
            select_channels(rec, ["T9"])


class TestLabels:
    def test_three_segments_with_blank_lines(self, tmp_path):
        p = tmp_path / "u.lab"
        p.write_text("0.0\t0.1\tpau\n\n0.1\t0.3\ta\n0.3\t0.4\tt\n\n")
        seg = parse_labels(p)
        assert len(seg) == 3
        assert seg.labels() == ["pau", "a", "t"]

    def test_gap_filled_with_pause(self, tmp_path):
        p = tmp_path / "u.lab"
        p.write_text("0.1 0.3 a\n0.5 0.6 t\n")
        seg = parse_labels(p)
        assert seg.labels() == ["pau", "a", "pau", "t"]
        assert seg.entries[0].start == 0.0
        assert seg.entries[2] == Segment("pau", 0.3, 0.5)

    def test_overlap_reports_line(self, tmp_path):
        p = tmp_path / "u.lab"
        p.write_text("0.0 0.3 a\n0.2 0.4 t\n")
        with pytest.raises(FormatError) as exc:
            parse_labels(p)
        assert ":2:" in str(exc.value)

    def test_entries_tile_interval(self, tmp_path):
        p = tmp_path / "u.lab"
        p.write_text("0.05 0.3 a\n0.3 0.45 t\n")
        seg = parse_labels(p)
        cursor = 0.0
        for e in seg:
            assert e.start == pytest.approx(cursor)
            cursor = e.end
        assert cursor == pytest.approx(0.45)


class TestPhoneClass:
    @pytest.mark.parametrize(
        "label,expected",
        [
            ("t", PhoneClass.CORONAL),
            ("d", PhoneClass.CORONAL),
            ("ʃ", PhoneClass.CORONAL),
            ("k", PhoneClass.DORSAL),
            ("ŋ", PhoneClass.DORSAL),
            ("a", PhoneClass.OTHER),
            ("pau", PhoneClass.SILENCE),
            ("sil", PhoneClass.SILENCE),
            ("#", PhoneClass.SILENCE),
        ],
    )
    def test_defaults(self, label, expected):
        assert phone_class(label) == expected

    def test_override_table(self, tmp_path):
        p = tmp_path / "classes.json"
        p.write_text(json.dumps({"coronal": ["q"], "dorsal": [], "silence": ["X"]}))
        table = PhoneClassTable.from_json(p)
        assert phone_class("q", table) == PhoneClass.CORONAL
        assert phone_class("t", table) == PhoneClass.OTHER
        assert phone_class("X", table) == PhoneClass.SILENCE
