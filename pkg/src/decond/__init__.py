"""Deconditional Gaussian processes for downscaling aggregate observations.

The latent high-resolution field ``f`` is observed only through noisy
conditional expectations ``E[f(X) | Y = y]`` at low-resolution covariates
``y``. Bags of high-resolution points paired with bag covariates estimate the
conditional mean operator; exact and sparse variational posteriors over ``f``
follow from it.
"""

__version__ = "0.1.0"

from .models import FittedModel, ModelSettings, fit_model, load_model, save_model

__all__ = ["FittedModel", "ModelSettings", "fit_model", "load_model", "save_model", "__version__"]
