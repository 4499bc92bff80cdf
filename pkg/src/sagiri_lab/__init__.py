"""Two-stage LDR enhancement: a color restorer followed by a masked latent-diffusion refiner."""

__version__ = "0.1.0"
