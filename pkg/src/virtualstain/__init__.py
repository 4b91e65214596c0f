"""Virtual H&E staining of three-channel label-free microscopy images.

Channel order everywhere in this package is fixed:
(non-radiative absorption, radiative absorption, optical scattering).
"""

__version__ = "0.1.0"

from .core import (
    ChannelImage,
    MultiChannelImage,
    RGBImage,
    RunManifest,
    load_image,
    save_image,
    read_manifest,
    write_manifest,
)

__all__ = [
    "ChannelImage",
    "MultiChannelImage",
    "RGBImage",
    "RunManifest",
    "load_image",
    "save_image",
    "read_manifest",
    "write_manifest",
    "__version__",
]
