"""Deep Generative Decoder.

Encoder-free generative model: per-sample latent representations, decoder
weights and a Gaussian mixture over latent space are fitted jointly by MAP
estimation.
"""

from dgd.backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
