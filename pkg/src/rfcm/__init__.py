"""Future captioning for object-placement episodes.

Generates a sentence describing the event expected at the next timestep
from feature vectors of the clips seen so far. The model couples a
relational self-attention encoder over clip embeddings with a masked
transformer encoder/decoder over clips + caption tokens, trained with a
composite loss (caption cross-entropy, first-word term, temporal ranking
penalty, future-feature MSE) on top of a small reverse-mode autodiff
engine.
"""

__version__ = "0.1.0"
