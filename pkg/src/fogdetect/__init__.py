"""Master/worker object-detection offloading across fog and cloud nodes, with a deterministic evaluation harness."""

from .detection import BoundingBox, Detection, GridSpec, GridTensor, decode, encode, iou, nms
from .preprocess import ImageFormat, ImagePayload, Mode, prepare, rescale_dims

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Detection",
    "GridSpec",
    "GridTensor",
    "ImageFormat",
    "ImagePayload",
    "Mode",
    "decode",
    "encode",
    "iou",
    "nms",
    "prepare",
    "rescale_dims",
]
