"""Gradient inversion against adapter fine-tuning on a toy transformer.

Modules: ``subspace`` (spans and residuals), ``toymodel`` (model, forward,
backward), ``fedsim`` (client rounds and defenses), ``utr`` (the attack),
``capacity`` (span-capacity sweep), ``metrics`` (ROUGE) and ``cli``.
"""

__version__ = "0.1.0"
