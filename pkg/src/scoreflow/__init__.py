"""Desk-scale score-to-singing pipeline: RVQ tokens, a multi-stream token LM,
and a flow-matching mel generator on a hand-rolled autodiff engine."""

__version__ = "0.1.0"
