from .agent import Worker, WorkerAgent
from .detectors import LatencyModel, MockDetector, TensorFileDetector

__all__ = ["LatencyModel", "MockDetector", "TensorFileDetector", "Worker", "WorkerAgent"]
