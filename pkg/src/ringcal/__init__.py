"""ringcal: utility-based car-following simulation and state-space calibration
for vehicles on circular roads."""

from .utility import AnticipationConfig, UtilityParams
from .decision import ActionGrid
from .ssm import DriverParams, NoiseParams
from .sim import RingGeometry, ScenarioConfig, SimOutput, simulate
from .calibrate import CalibrationConfig, RegularizationConfig, calibrate_all

__version__ = "0.1.0"

__all__ = [
    "AnticipationConfig",
    "UtilityParams",
    "ActionGrid",
    "DriverParams",
    "NoiseParams",
    "RingGeometry",
    "ScenarioConfig",
    "SimOutput",
    "simulate",
    "CalibrationConfig",
    "RegularizationConfig",
    "calibrate_all",
    "__version__",
]
