"""Place recognition from RGB-D images via instance-level line clusters.

The pipeline: detect 2-D line segments in the color image, lift them to 3-D
with the depth map and fitted local planes, cluster the lines of a frame into
object instances with an attention network, embed each cluster into a compact
descriptor, and recognize places by nearest-neighbor voting over cluster
descriptors.
"""

__version__ = "0.1.0"

from .camera import PinholeCamera
__all__ = ["PinholeCamera", "__version__"]
