"""Toy garment-transfer human animation: a frozen video diffusion transformer with
human-animation and garment-transfer adapter stacks, a triplet construction
pipeline, and evaluation metrics."""

__version__ = "0.1.0"

from .backbone import BackboneConfig  # noqa: E402
from .conditioning import PoseSequence, TripletSample  # noqa: E402
from .dual_module import InjectionSchedule  # noqa: E402
from .training import TrainConfig, TrainState  # noqa: E402
from .sampling import GenerationRequest, generate, generate_interpolated  # noqa: E402
from .estimator import TryOnAnimator  # noqa: E402

__all__ = ["BackboneConfig", "PoseSequence", "TripletSample", "InjectionSchedule", "TrainConfig",
           "TrainState", "GenerationRequest", "generate", "generate_interpolated", "TryOnAnimator"]
