"""Desk-scale transfer-RL laboratory.

A pixel jumping-task family, a small reverse-mode autodiff engine, PPO with
per-layer encoder freezing, a policy-consistency auxiliary objective, and a
suite of representation probes, wired together behind the `pisco` CLI.
"""

__version__ = "0.1.0"
