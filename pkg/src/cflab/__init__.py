"""Car-following modelling lab.

Physics baselines (IDM, GHR) calibrated by a genetic algorithm, a
physics-informed LSTM that emits IDM parameters, gradient-based
meta-learning over drivers, a synthetic fleet generator, driving-style
analysis and the benchmark harness that ranks them.
"""

from .config import __version__
from .core import CFEvent, DriverTask, IDMParams, KinematicState
from .physics import FeasibleBox, GHRParams

__all__ = ["__version__", "CFEvent", "DriverTask", "IDMParams", "KinematicState", "FeasibleBox", "GHRParams"]
