from .clock import LinkModel, VirtualClock
from .scenario import Scenario, load_scenario
from .sim import client_inject, run_simulation

__all__ = ["LinkModel", "Scenario", "VirtualClock", "client_inject", "load_scenario", "run_simulation"]
