"""PrefSynth: retrieval-augmented, rank-guided preference synthesis."""

__version__ = "0.1.0"
