"""Class-incremental learning with random path selection over a modular network."""
from .kernels import COMPILED
from .model import Network, NetworkConfig, build_network, forward
from .paths import Path
from .trainer import TrainerConfig, run_plain, run_stream

__version__ = "0.1.0"

__all__ = ["COMPILED", "Network", "NetworkConfig", "Path", "TrainerConfig", "build_network", "forward",
           "run_plain", "run_stream", "__version__"]
