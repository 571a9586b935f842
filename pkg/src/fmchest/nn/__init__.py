from .checkpoint import FM_MAGIC, SM_MAGIC, load_checkpoint, save_checkpoint
from .layers import sinusoidal_embedding
from .optim import AdamW
from .unet import NetworkConfig, VelocityNet

__all__ = [
    "AdamW",
    "FM_MAGIC",
    "NetworkConfig",
    "SM_MAGIC",
    "VelocityNet",
    "load_checkpoint",
    "save_checkpoint",
    "sinusoidal_embedding",
]
