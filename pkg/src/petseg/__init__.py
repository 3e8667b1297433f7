"""PET/CT lesion segmentation toolkit: volume I/O, preprocessing, augmentation,
loss and training harness, lesion metrics, sliding-window inference and splits."""

__version__ = "0.1.0"

from .errors import ContractError, GeometryError, NiftiError, PetsegError
from .volume import Kind, PatchRegion, Volume3D

__all__ = ["ContractError", "GeometryError", "Kind", "NiftiError", "PatchRegion", "PetsegError", "Volume3D", "__version__"]
