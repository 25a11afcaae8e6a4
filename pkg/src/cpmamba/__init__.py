"""CPMamba: selective state-space channel prediction for MIMO-OFDM at desk scale."""

__version__ = "0.1.0"
