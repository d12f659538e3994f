"""Hybrid motion planning: a fast point-obstacle tree-search MPC, a shape-aware
dual-certificate MPC and a command layer that switches between them."""

__version__ = "0.1.0"
