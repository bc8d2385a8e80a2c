"""4D cone-beam CT reconstruction toolkit.

Ray-marching cone-beam projectors built around a per-pixel ray-path
representation, respiratory-gated acquisition simulation on an analytic
breathing phantom, OSSART reconstruction with spatial and temporal TV,
and deformation-based refinement from observed views only.
"""

from .geometry import ConeBeamGeometry, Ray, ray_for_pixel, source_position
from .volume import RayVolume, View, Volume3, centered_volume

__all__ = [
    "ConeBeamGeometry",
    "Ray",
    "ray_for_pixel",
    "source_position",
    "Volume3",
    "View",
    "RayVolume",
    "centered_volume",
]

__version__ = "0.1.0"
