"""Joint 3D multi-object tracking and diverse trajectory forecasting."""
from .config import ModelConfig, RunConfig, TrackConfig, TrainConfig
from .pipeline import Model, Scene, init_model, run_sequence, step_frame, train

__version__ = "0.1.0"

__all__ = ["Model", "ModelConfig", "RunConfig", "Scene", "TrackConfig", "TrainConfig", "init_model", "run_sequence",
           "step_frame", "train"]
