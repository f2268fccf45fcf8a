"""Tests for the DP aligner, information loss, and the TSV interchange."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import min_alignment_cost, note_list, random_alignment_instance
from perfid.align import (
    Alignment,
    DuplicateMatch,
    EmptyInput,
    UnresolvableRow,
    ZeroNotes,
    align,
    alignment_cost,
    export_alignment,
    filter_matched,
    fit_time_map,
    import_alignment,
    info_loss,
)


def identity_alignment(n, n_extra=0):
    pairs = [(i, i) for i in range(n)]
    extra = list(range(n, n + n_extra))
    return Alignment(pairs=pairs, missing=[], extra=extra)


def test_identity_alignment():
    x = note_list([(60, 0.0), (64, 0.5), (67, 1.0), (72, 1.5)])
    result = align(x, x)
    assert result.pairs == [(i, i) for i in range(4)]
    assert result.missing == []
    assert result.extra == []


def test_single_insertion_is_extra():
    score = note_list([(60, 0.0), (62, 0.5), (64, 1.0), (65, 1.5)])
    perf = note_list([(60, 0.0), (62, 0.5), (73, 0.75), (64, 1.0), (65, 1.5)])
    result = align(perf, score)
    assert len(result.pairs) == 4
    assert result.missing == []
    assert [perf.notes[i].pitch for i in result.extra] == [73]


def test_swapped_notes_recover_pitch_true_pairing():
    # notes 3 and 4 swap onsets but keep distinct pitches
    pitches = [60, 62, 64, 65, 67, 69, 71, 72]
    onsets = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]
    score = note_list(list(zip(pitches, onsets)))
    perf_onsets = list(onsets)
    perf_onsets[3], perf_onsets[4] = perf_onsets[4], perf_onsets[3]
    perf = note_list(list(zip(pitches, perf_onsets)))
    result = align(perf, score)
    matched = {
        (perf.notes[i].pitch, score.notes[j].pitch) for i, j in result.pairs
    }
    assert all(p == s for p, s in matched)
    a, b = result.time_map
    cost = alignment_cost(result, perf, score)
    assert cost == pytest.approx(min_alignment_cost(perf, score, a, b))


def test_tempo_scaled_performance_aligns_fully():
    score = note_list([(60 + k % 12, 0.4 * k) for k in range(20)])
    perf = note_list(
        [(n.pitch, 1.3 * n.onset + 2.0) for n in score.notes]
    )
    result = align(perf, score)
    assert len(result.pairs) == 20
    assert result.missing == [] and result.extra == []
    a, b = result.time_map
    assert a == pytest.approx(1.3, abs=1e-6)
    assert b == pytest.approx(2.0, abs=1e-6)


def test_empty_input_rejected():
    x = note_list([(60, 0.0)])
    empty = note_list([])
    with pytest.raises(EmptyInput):
        align(empty, x)
    with pytest.raises(EmptyInput):
        align(x, empty)


def test_dp_matches_exhaustive_minimum():
    rng = np.random.default_rng(42)
    for _ in range(60):
        perf, score = random_alignment_instance(rng)
        result = align(perf, score)
        a, b = result.time_map
        got = alignment_cost(result, perf, score)
        want = min_alignment_cost(perf, score, a, b)
        assert got == pytest.approx(want, abs=1e-9)


def test_alignment_invariants_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(100):
        perf, score = random_alignment_instance(rng)
        result = align(perf, score)
        result.validate()
        assert sorted([i for i, _ in result.pairs] + result.extra) == list(
            range(len(perf))
        )
        assert sorted([j for _, j in result.pairs] + result.missing) == list(
            range(len(score))
        )
        for i, j in result.pairs:
            assert perf.notes[i].pitch == score.notes[j].pitch


def test_info_loss_exact_values():
    assert info_loss(identity_alignment(85, n_extra=15)) == 15.0
    assert info_loss(identity_alignment(500)) == 0.0


def test_info_loss_zero_notes_rejected():
    with pytest.raises(ZeroNotes):
        info_loss(Alignment(pairs=[], missing=[2], extra=[]))


@given(
    st.integers(min_value=0, max_value=400),
    st.integers(min_value=1, max_value=400),
)
def test_info_loss_formula(n_extra, n_matched):
    loss = info_loss(identity_alignment(n_matched, n_extra=n_extra))
    assert abs(loss - n_extra / (n_matched + n_extra) * 100.0) < 1e-12
    assert 0.0 <= loss <= 100.0


@given(
    st.integers(min_value=0, max_value=100),
    st.integers(min_value=1, max_value=100),
)
def test_info_loss_scale_free(n_extra, n_matched):
    single = info_loss(identity_alignment(n_matched, n_extra=n_extra))
    doubled = info_loss(identity_alignment(2 * n_matched, n_extra=2 * n_extra))
    assert doubled == pytest.approx(single, abs=1e-12)


def test_info_loss_monotone_in_extra_notes():
    score = note_list([(60 + k, 0.3 * k) for k in range(10)])
    perf_events = [(60 + k, 0.3 * k) for k in range(10)]
    base = info_loss(align(note_list(perf_events), score))
    # pitch 127 appears nowhere in the score, so the note cannot match
    widened = info_loss(align(note_list(perf_events + [(127, 1.0)]), score))
    assert widened >= base


def test_filter_matched_order_and_count():
    score = note_list([(60, 0.0), (62, 0.5), (64, 1.0), (65, 1.5)])
    perf = note_list([(60, 0.0), (99, 0.2), (62, 0.5), (64, 1.0), (65, 1.5)])
    result = align(perf, score)
    pairs = filter_matched(result, perf, score)
    assert len(pairs) == result.n_p - result.n_e
    onsets = [p.onset for p, _ in pairs]
    assert onsets == sorted(onsets)
    assert all(p.pitch == s.pitch for p, s in pairs)


def test_filter_matched_bounds_check():
    x = note_list([(60, 0.0), (62, 0.5)])
    bad = Alignment(pairs=[(0, 0), (5, 1)], missing=[], extra=[])
    with pytest.raises(IndexError):
        filter_matched(bad, x, x)


def test_export_import_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(25):
        perf, score = random_alignment_instance(rng, max_notes=6)
        # resolution needs unambiguous (onset, pitch) keys on each side
        if _has_near_duplicates(perf) or _has_near_duplicates(score):
            continue
        original = align(perf, score)
        table = export_alignment(original, perf, score)
        restored = import_alignment(table, perf, score)
        assert restored.pairs == original.pairs
        assert restored.missing == original.missing
        assert restored.extra == original.extra


def _has_near_duplicates(notes):
    seen = []
    for n in notes:
        for pitch, onset in seen:
            if pitch == n.pitch and abs(onset - n.onset) <= 0.030:
                return True
        seen.append((n.pitch, n.onset))
    return False


def test_import_rejects_far_row():
    x = note_list([(60, 0.0), (62, 0.5)])
    table = (
        "perf_id\tperf_onset\tperf_pitch\tscore_id\tscore_onset\tscore_pitch\n"
        "0\t0.200000\t60\t0\t0.000000\t60\n"
    )
    with pytest.raises(UnresolvableRow):
        import_alignment(table, x, x)


def test_import_rejects_duplicate_rows():
    x = note_list([(60, 0.0), (62, 0.5)])
    table = (
        "perf_id\tperf_onset\tperf_pitch\tscore_id\tscore_onset\tscore_pitch\n"
        "0\t0.000000\t60\t0\t0.000000\t60\n"
        "0\t0.000000\t60\t0\t0.000000\t60\n"
    )
    with pytest.raises(DuplicateMatch):
        import_alignment(table, x, x)


def test_import_star_rows():
    x = note_list([(60, 0.0), (62, 0.5)])
    table = (
        "perf_id\tperf_onset\tperf_pitch\tscore_id\tscore_onset\tscore_pitch\n"
        "0\t0.000000\t60\t0\t0.000000\t60\n"
        "1\t0.500000\t62\t*\t*\t*\n"
        "*\t*\t*\t1\t0.500000\t62\n"
    )
    result = import_alignment(table, x, x)
    assert result.pairs == [(0, 0)]
    assert result.extra == [1]
    assert result.missing == [1]
    assert info_loss(result) == 50.0


def test_alignment_validation_rejects_crossing():
    with pytest.raises(ValueError):
        Alignment(pairs=[(0, 1), (1, 0)], missing=[], extra=[])


def test_alignment_validation_rejects_double_use():
    with pytest.raises(ValueError):
        Alignment(pairs=[(0, 0), (0, 1)], missing=[], extra=[])


def test_fit_time_map_recovers_affine():
    s = np.linspace(0, 10, 50)
    p = 1.7 * s + 0.4
    a, b = fit_time_map(s, p)
    assert a == pytest.approx(1.7)
    assert b == pytest.approx(0.4)


def test_fit_time_map_degenerate_onsets():
    a, b = fit_time_map([2.0, 2.0, 2.0], [3.0, 3.1, 3.2])
    assert a == 1.0
    assert b == pytest.approx(1.1)
