"""Speaker-invariant multi-task spoofing detection, from scratch.

A small research stack: a reverse-mode autodiff tape, a CNN+Transformer
utterance encoder with two attention-pooled classifier heads, a synthetic
spoofing corpus, adversarial training via gradient reversal, and EER-based
evaluation with speaker-separability probes.
"""

__version__ = "0.1.0"
