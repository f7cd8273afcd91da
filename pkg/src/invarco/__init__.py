"""Invariance co-training: viewpoint/lighting/clutter-invariant visuomotor
policies learned from multi-view demonstrations and static scene clusters,
evaluated in a synthetic quasistatic tabletop world."""

__version__ = "0.1.0"
