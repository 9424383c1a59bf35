"""Transmission and distribution market coordination: clearing, learning and evaluation."""
from .coord import Strategy, evaluate_hour
from .grid import GridError, PowerSystem, load_system, write_system
from .opf import OpfOptions, SolverError
from .scenario import ScenarioConfig, generate_scenario

__all__ = ["GridError", "OpfOptions", "PowerSystem", "ScenarioConfig", "SolverError", "Strategy",
           "evaluate_hour", "generate_scenario", "load_system", "write_system"]
__version__ = "0.1.0"
