"""7D pose estimation of articulated instruments from stereo keypoints."""
__version__ = "0.1.0"

from .errors import StereoPoseError  # noqa: E402
from .geometry import CameraRig, Detection, Pose7D, StereoObservation  # noqa: E402
from .instruments import InstrumentModel, make_instrument_set  # noqa: E402

__all__ = ["CameraRig", "Detection", "InstrumentModel", "Pose7D", "StereoObservation",
           "StereoPoseError", "__version__", "make_instrument_set"]
