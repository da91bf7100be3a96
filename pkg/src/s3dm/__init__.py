"""Single-shape generative modeling over triplane latents.

Train a triplane autoencoder plus a latent denoising diffusion model on
one textured mesh, then generate, retarget, outpaint, and locally edit
textured variations of it.
"""

from .config import PipelineConfig, make_config, parse_config
from .pipeline import Pipeline
from .triplane import TriplaneLatent

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "make_config", "parse_config", "Pipeline",
           "TriplaneLatent", "__version__"]
