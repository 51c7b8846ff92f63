from .config import Config
from .store import ParameterStore, load_checkpoint, save_checkpoint

__all__ = ["Config", "ParameterStore", "load_checkpoint", "save_checkpoint"]
