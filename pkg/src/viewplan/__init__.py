"""Pick-and-place planning over imagined orthographic views of a radiance field.

The pipeline: fit a dense voxel radiance field from posed RGB images, render
orthographic novel views from it, score per-pixel pick/place action values
with convolutional models, and pick the global argmin over pixels x views to
parameterize a two-pose manipulation primitive.
"""

__version__ = "0.1.0"

from viewplan.errors import ConfigError, DomainError, IOFailure, NumericsError

__all__ = [
    "ConfigError",
    "DomainError",
    "IOFailure",
    "NumericsError",
    "__version__",
]
