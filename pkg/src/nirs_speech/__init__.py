"""Online 3-class imagined-speech fNIRS BCI: signal chain, RLDA, study simulation."""

__version__ = "0.1.0"
