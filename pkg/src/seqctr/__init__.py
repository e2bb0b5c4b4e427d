"""seqctr: two-stage CTR prediction on user behavior sequences.

Stage 1 pretrains a category-conditioned self-attention decoder on
next-item prediction; stage 2 fuses it into a discriminative CTR backbone
through embedding transfer and decoder inheritance.
"""

__version__ = "0.1.0"
