"""Face anonymization with a landmark-conditioned, identity-controlled GAN."""

__version__ = "0.1.0"
