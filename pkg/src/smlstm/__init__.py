"""sm-LSTM: recurrent, attention-driven image-sentence matching in numpy."""
from .config import TrainingConfig, desk_profile, reference_profile, tiny_profile
from .model import SmLSTM

__all__ = ["SmLSTM", "TrainingConfig", "desk_profile", "reference_profile", "tiny_profile"]
__version__ = "0.1.0"
