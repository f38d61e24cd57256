"""Attention encoder-decoder training with twin forward/backward decoders.

The backward (right-to-left) decoder exists only during optimization: it is
tied to the forward decoder through an agreement penalty (mean L2 distance
for equal-length targets, soft-DTW for unequal-length subword targets) and
discarded at decode time.
"""

__version__ = "0.1.0"
