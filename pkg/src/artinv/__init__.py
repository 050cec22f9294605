"""Acoustic-to-articulatory inversion with a BiLSTM and a windowed-sinc smoothing layer."""

__version__ = "0.1.0"
