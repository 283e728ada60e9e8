"""BeSplat: sharp Gaussian-splat scenes and continuous SE(3) camera motion
recovered jointly from a single motion-blurred image and its event stream."""

__version__ = "0.1.0"
