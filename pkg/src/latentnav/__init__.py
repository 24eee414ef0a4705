"""Gridworld navigation with compact latent visual reasoning traces.

Pipeline: procedural multi-room gridworld -> shortest-path expert
trajectories -> sliced five-field training samples (instruction, history,
textual trace, latent visual trace, actions) -> tiny autoregressive token
policy trained with gated trace modes and cross-mode alignment -> online
multi-stage evaluation (SR/ISR/CSR/CGT/APS).
"""

__version__ = "0.1.0"
