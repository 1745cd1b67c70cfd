"""Instrument-aware music source separation.

A residual U-Net predicts a spectrogram mask for one target instrument
while a classifier head attached to its bottleneck predicts per-frame
instrument activity. At inference the smoothed activity predictions gate
the separated magnitude along time.
"""

__version__ = "0.1.0"
