"""Low-dose CT simulation and sharpness-aware adversarial denoising on numpy."""

__version__ = "0.1.0"
