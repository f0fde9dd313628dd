"""Surface-normal estimation for equirectangular panoramas with spherical-geometry attention."""

__version__ = "0.1.0"
