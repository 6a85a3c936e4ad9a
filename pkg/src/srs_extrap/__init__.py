"""Two-stage channel extrapolation for hopping-SRS TDD massive MIMO-OFDM."""

__version__ = "0.1.0"
