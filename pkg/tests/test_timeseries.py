import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record
from vitalgate.errors import DataError
from vitalgate.timeseries import (
    AnnotationInterval,
    ChannelKind,
    Factor,
    NormalizationStats,
    PatientRecord,
    apply_normalization,
    compute_normalization,
    delay_targets,
    extract_event_segments,
    invert_normalization,
    load_dataset,
    write_dataset,
)


def _record(sys, dia, hr=None, icp=None, pid="p"):
    n = len(sys)
    return PatientRecord(pid, {
        ChannelKind.HR: hr if hr is not None else np.arange(n, dtype=float),
        ChannelKind.SysABP: sys,
        ChannelKind.DiaABP: dia,
        ChannelKind.SysICP: icp if icp is not None else np.arange(n, dtype=float) + 1,
    })


class TestRecord:
    def test_channel_length_mismatch(self):
        with pytest.raises(DataError):
            _record(np.ones(3), np.ones(4))

    def test_nonfinite_rejected(self):
        with pytest.raises(DataError):
            _record(np.array([1.0, np.nan]), np.zeros(2))

    def test_interval_bounds(self):
        with pytest.raises(DataError):
            AnnotationInterval(Factor.BS, 5, 5)
        with pytest.raises(DataError):
            make_record(n=50, annotations=[(Factor.BS, 40, 60)])

    def test_same_factor_overlap_rejected(self):
        with pytest.raises(DataError):
            make_record(n=100, annotations=[(Factor.BS, 10, 30), (Factor.BS, 20, 40)])

    def test_arrays_read_only(self):
        rec = make_record(n=20)
        with pytest.raises(ValueError):
            rec[ChannelKind.HR][0] = 1.0


class TestNormalization:
    def test_pooled_hand_values(self):
        s = compute_normalization([_record(np.array([2.0, 2.0]), np.array([0.0, 0.0]))])
        assert s.bp_mean == 1.0 and s.bp_std == 1.0

    def test_pooled_mean_single_patient(self):
        s = compute_normalization([_record(np.array([120.0, 122.0]), np.array([80.0, 78.0]))])
        assert s.bp_mean == 100.0

    def test_constant_hr_is_degenerate(self):
        with pytest.raises(DataError):
            compute_normalization([_record(np.array([1.0, 2.0]), np.array([0.0, 1.0]), hr=np.full(2, 70.0))])

    def test_apply_definition(self):
        stats = NormalizationStats(100.0, 20.0, 70.0, 5.0, 10.0, 2.0)
        rec = _record(np.array([120.0]), np.array([80.0]), hr=np.array([70.0]), icp=np.array([10.0]))
        out = apply_normalization(rec, stats)
        assert out[ChannelKind.SysABP][0] == 1.0
        assert out[ChannelKind.DiaABP][0] == -1.0
        assert out[ChannelKind.HR][0] == 0.0

    def test_round_trip(self):
        rec = make_record(n=300, seed=3)
        stats = compute_normalization([rec])
        back = invert_normalization(apply_normalization(rec, stats), stats)
        for k in ChannelKind:
            np.testing.assert_allclose(back[k], rec[k], rtol=1e-12)


class TestSegments:
    def test_interior_event(self):
        rec = make_record(n=1000, annotations=[(Factor.SC, 100, 200)])
        (seg,) = extract_event_segments(rec, Factor.SC)
        assert (seg.offset, len(seg), seg.event_span) == (0, 300, (100, 200))
        assert seg.targets.sum() == 100
        np.testing.assert_array_equal(np.nonzero(seg.targets)[0], np.arange(100, 200))

    def test_left_clipped(self):
        rec = make_record(n=1000, annotations=[(Factor.BS, 0, 50)])
        (seg,) = extract_event_segments(rec, Factor.BS)
        assert (seg.offset, len(seg), seg.event_span) == (0, 100, (0, 50))

    def test_no_annotations(self):
        assert extract_event_segments(make_record(n=100), Factor.DT) == []

    def test_other_factors_not_targeted(self):
        rec = make_record(n=1000, annotations=[(Factor.SC, 300, 400), (Factor.BS, 220, 260)])
        (seg,) = extract_event_segments(rec, Factor.SC)
        assert seg.targets.sum() == 100
        assert seg.segment_id == "A:SC:0"


class TestDelay:
    @pytest.mark.parametrize("y, d, want", [
        ([0, 1, 1, 0], 1, [0, 0, 1, 1]),
        ([1, 0, 0], 2, [0, 0, 1]),
        ([1, 0, 1], 0, [1, 0, 1]),
    ])
    def test_examples(self, y, d, want):
        np.testing.assert_array_equal(delay_targets(np.array(y), d), want)

    def test_too_long(self):
        with pytest.raises(ValueError):
            delay_targets(np.zeros(3), 3)

    @given(st.lists(st.integers(0, 1), min_size=2, max_size=40), st.integers(0, 10))
    def test_composition(self, y, d):
        y = np.array(y)
        d = min(d, len(y) - 1)
        step = y
        for _ in range(d):
            step = delay_targets(step, 1)
        np.testing.assert_array_equal(step, delay_targets(y, d))


class TestFileFormat:
    def test_write_load_identity(self, tmp_path):
        recs = [make_record("A", 120, 1, [(Factor.BS, 10, 20), (Factor.X, 15, 30)]), make_record("B", 90, 2)]
        recs = [PatientRecord(r.patient_id, {k: np.round(r[k], 6) for k in ChannelKind}, r.annotations) for r in recs]
        write_dataset(recs, tmp_path)
        back = load_dataset(tmp_path)
        assert back == recs

    def _write(self, tmp_path, signals, annotations="factor,start,end\n"):
        d = tmp_path / "P1"
        d.mkdir()
        (d / "signals.csv").write_text(signals)
        (d / "annotations.csv").write_text(annotations)

    def test_nan_cell_named(self, tmp_path):
        self._write(tmp_path, "t,hr,sys_abp,dia_abp,sys_icp\n0,1,2,3,4\n1,1,nan,3,4\n")
        with pytest.raises(DataError, match="signals.csv:3"):
            load_dataset(tmp_path)

    def test_bad_interval(self, tmp_path):
        self._write(tmp_path, "t,hr,sys_abp,dia_abp,sys_icp\n0,1,2,3,4\n1,1,2,3,4\n", "factor,start,end\nBS,1,1\n")
        with pytest.raises(DataError, match="annotations.csv:2"):
            load_dataset(tmp_path)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=30))
    def test_six_decimal_round_trip(self, tmp_path_factory, values):
        vals = np.round(np.array(values), 6)
        root = tmp_path_factory.mktemp("rt")
        rec = PatientRecord("Q", {k: vals for k in ChannelKind})
        write_dataset([rec], root)
        assert load_dataset(root) == [rec]
