"""Desk-scale voice-conversion laboratory.

Synthetic unit corpora with ground-truth factors, adversarial
feature-statistic style perturbation, teacher-guided prosody distillation,
and the objective metrics to verify the whole mechanism.
"""

__version__ = "0.1.0"
