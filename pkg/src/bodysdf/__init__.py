"""Articulated implicit bodies: per-part neural SDFs blended by SoftMin.

Shape and pose live in separate latent spaces (auto-decoded shape code,
VAE pose/joint priors); supervision is non-rigid geometric regression on
point samples; ground truth comes from procedural capsule bodies with an
analytic SDF oracle.
"""

__version__ = "0.1.0"

from .backend import active_backend  # noqa: F401
