"""Reproducible gloss-free sign language translation benchmark.

Modules: ``corpus`` (manifests, sampling, tokenization, toy data), ``model``
(encoder-decoder with named parameter groups), ``objectives`` (pretraining
and translation losses), ``trainer`` (two-stage runs), ``metrics`` (BLEU,
ROUGE-L, convention audit) and ``cli`` (the ``slt`` command).
"""

__version__ = "0.1.0"
