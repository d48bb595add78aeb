from .scheduler import MasterConfig, Scheduler, TaskState, Tier

__all__ = ["MasterConfig", "Scheduler", "TaskState", "Tier"]
