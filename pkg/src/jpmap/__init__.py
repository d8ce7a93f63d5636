"""Joint (image, latent) MAP restoration with a denoising VAE prior."""

__version__ = "0.1.0"
