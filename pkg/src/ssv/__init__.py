"""Self-supervised viewpoint estimation from unlabeled image collections."""

from ssv.codec import EulerViewpoint, flip_viewpoint, geodesic_distance, viewpoint_to_rotation

__version__ = "0.1.0"

__all__ = [
    "EulerViewpoint",
    "ViewpointEstimator",
    "flip_viewpoint",
    "geodesic_distance",
    "viewpoint_to_rotation",
    "__version__",
]


def __getattr__(name):
    # estimator pulls in torch-heavy modules; import lazily
    if name == "ViewpointEstimator":
        from ssv.estimator import ViewpointEstimator

        return ViewpointEstimator
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
