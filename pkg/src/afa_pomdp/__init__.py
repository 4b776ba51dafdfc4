"""Joint task / feature-acquisition policy learning with sequential VAE beliefs."""

__version__ = "0.1.0"
