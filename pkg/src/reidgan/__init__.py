"""Face-gated DCGAN augmentation for a compressed CondenseNet re-identification classifier."""

__version__ = "0.1.0"
