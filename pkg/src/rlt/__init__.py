"""Online chunk-level RL refinement of a frozen action-proposal backbone
on a planar precision-insertion task, with a trained readout-token state
representation and human-in-the-loop intervention support."""

__version__ = "0.1.0"
