"""Shared test utilities: instance builders and brute-force oracles."""

import hashlib
import itertools
from pathlib import Path

import numpy as np

from perfid.midi_io import Note, NoteList
from perfid.neural import Tensor


def tree_hashes(root: Path) -> dict:
    """Digest of every file under ``root``, keyed by relative path."""
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            out[str(path.relative_to(root))] = digest
    return out


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def weighted_sum(t, proj):
    """Scalar projection so any layer output can drive a gradient check."""

    def backward(grad):
        return (grad * proj,)

    return Tensor((t.data * proj).sum(), parents=(t,), backward_fn=backward)


def check_gradients(fn, tensors, h=1e-5, rel_tol=1e-4):
    """Central-difference check of every coordinate of every tensor."""
    for t in tensors:
        t.grad = None
    fn().backward()
    for t in tensors:
        analytic = np.asarray(t.grad, dtype=float).reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = float(fn().data)
            flat[i] = keep - h
            lo = float(fn().data)
            flat[i] = keep
            numeric = (hi - lo) / (2 * h)
            scale = max(abs(numeric), abs(analytic[i]), 1e-6)
            assert abs(numeric - analytic[i]) <= rel_tol * scale, (t, i)


def note_list(events, duration=0.1, velocity=64):
    """NoteList from (pitch, onset) or (pitch, onset, velocity) tuples."""
    notes = []
    for event in events:
        pitch, onset = event[0], event[1]
        vel = event[2] if len(event) > 2 else velocity
        notes.append(Note(pitch, onset, onset + duration, vel))
    notes.sort(key=lambda n: (n.onset, n.pitch, n.channel))
    return NoteList(notes=notes)


def random_alignment_instance(rng, max_notes=7, n_pitches=3):
    """A small random (perf, score) pair with an ambiguous pitch alphabet."""
    pitches = [60 + 2 * k for k in range(n_pitches)]
    n = int(rng.integers(1, max_notes + 1))
    m = int(rng.integers(1, max_notes + 1))
    perf = note_list(
        sorted(
            (int(rng.choice(pitches)), float(t))
            for t in rng.uniform(0, 4, size=n)
        )
    )
    score = note_list(
        sorted(
            (int(rng.choice(pitches)), float(t))
            for t in rng.uniform(0, 4, size=m)
        )
    )
    return perf, score


def min_alignment_cost(perf, score, a, b, skip=1.0):
    """Exhaustive minimum of the alignment objective for a fixed time map.

    Every monotonic matching is a sorted performance index subset zipped
    with an equal-size sorted score index subset, so enumerate all of
    them. Feasible only when zipped pitches agree elementwise.
    """
    po = np.array([x.onset for x in perf.notes])
    pp = np.array([x.pitch for x in perf.notes])
    so = np.array([x.onset for x in score.notes])
    sp = np.array([x.pitch for x in score.notes])
    mapped = a * so + b
    n, m = len(po), len(so)
    best = skip * (n + m)  # the empty matching
    for k in range(1, min(n, m) + 1):
        perf_subsets = np.array(list(itertools.combinations(range(n), k)))
        score_subsets = np.array(list(itertools.combinations(range(m), k)))
        feasible = (
            pp[perf_subsets][:, None, :] == sp[score_subsets][None, :, :]
        ).all(axis=2)
        if not feasible.any():
            continue
        match_cost = np.abs(
            po[perf_subsets][:, None, :] - mapped[score_subsets][None, :, :]
        ).sum(axis=2)
        total = match_cost + skip * (n + m - 2 * k)
        best = min(best, float(total[feasible].min()))
    return best
