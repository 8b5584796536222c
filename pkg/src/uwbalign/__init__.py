"""Range-aided 7-DoF alignment of up-to-scale odometry.

Subpackages by concern:

* :mod:`uwbalign.geometry`    rotation / similarity-transform algebra
* :mod:`uwbalign.measurement` range model, datasets, synthetic data
* :mod:`uwbalign.fim`         Fisher information, CRLB, observability
* :mod:`uwbalign.gat`         QCQP initializer + NLS refinement
* :mod:`uwbalign.vro`         range-aided BA, trilateration, pose-graph
* :mod:`uwbalign.sim`         Monte-Carlo harness and scenarios
"""

__version__ = "0.1.0"
FORMAT_VERSION = 1

from uwbalign.geometry import (  # noqa: E402
    AffineTransform7,
    Pose,
    apply_affine,
    log_rotation,
    rodrigues,
    rotation_geodesic_error,
    skew,
)
from uwbalign.measurement import AnchorMap, Dataset, NoiseSpec, predict_range  # noqa: E402

__all__ = [
    "AffineTransform7",
    "AnchorMap",
    "Dataset",
    "NoiseSpec",
    "Pose",
    "apply_affine",
    "log_rotation",
    "predict_range",
    "rodrigues",
    "rotation_geodesic_error",
    "skew",
]
