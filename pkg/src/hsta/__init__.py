"""Hierarchical space-time attention for micro-expression recognition.

Two token streams (uniformly sampled video frames and the onset/apex frame
pair) are refined by cascaded unimodal self-attention, fused by symmetric
crossmodal attention over [CLS] tokens, stacked hierarchically, and trained
with an MSE objective. Everything runs on the float64 gradient-tape core in
``hsta.tensor`` so gradients stay checkable against finite differences.
"""

__version__ = "0.1.0"
