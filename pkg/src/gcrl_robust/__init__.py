"""Adversarial robustness lab for offline goal-conditioned agents.

Modules: ``diffmlp`` (numpy MLPs with reverse-mode gradients), ``gcenv``
(point-mass goal environments and datasets), ``agents`` (DDPG+HER, GCSL,
GoFar), ``attacks`` (uniform, SA and semi-contrastive attacks), ``simsr``
(cosine representation metric and regulariser), ``arts`` (SCAA and SimSR
defences) and ``bench`` (experiment harness and reports).
"""
from .errors import AttackError, ConfigError, DegenerateRepresentation, DimensionError, NumericalError

__version__ = "0.1.0"

__all__ = ["AttackError", "ConfigError", "DegenerateRepresentation", "DimensionError", "NumericalError"]
