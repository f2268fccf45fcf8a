"""Pianist identification from expressive MIDI performances.

Pipeline: parse performance/score MIDI, align note-for-note, extract
expressive features, train a 1D CNN classifier, and run the study
harnesses on synthetic corpora.
"""

__version__ = "0.1.0"
