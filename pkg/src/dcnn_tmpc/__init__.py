"""Closed-loop deep-brain-stimulation control toolkit.

Provides a multi-step difference-of-convex neural-network tube MPC
(DCNN TMPC), on-off / PI / linear-MPC baseline controllers, a synthetic
Parkinsonian patient simulator, and an experiment harness with a CLI.
"""

__version__ = "0.1.0"
