"""Indoor positioning by sliding-window factor-graph fusion of IMU, UWB-TDoA
and ultrasonic measurements, with a scenario simulator, an EKF baseline and
an evaluation harness.
"""

from .imu import ImuBias, ImuNoise, ImuSample, NavState, PreintegratedImu
from .manifold import Pose
from .optimizer import EngineConfig, FusionEngine, NlosConfig, WindowGraph
from .tdoa import AnchorSet, TdoaMeasurement, UltrasonicRange

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "EngineConfig",
    "FusionEngine",
    "ImuBias",
    "ImuNoise",
    "ImuSample",
    "NavState",
    "NlosConfig",
    "Pose",
    "PreintegratedImu",
    "TdoaMeasurement",
    "UltrasonicRange",
    "WindowGraph",
]
