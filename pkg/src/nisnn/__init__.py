"""Non-iterative LIF spiking networks with attention, on a small numpy autodiff core."""

from .attention import AttentionConfig, build_attention
from .model import NetworkSpec, Network, build_cnn, build_snn, load_model, save_model, transfer_weights_cnn_to_snn
from .neurons import build_leaky_kernel, exact_lif_solve, iterative_lif_forward, nilif_forward
from .profiler import EnergyModel, measure_spike_rates, profile_static
from .tensor import Tensor
from .train import TrainConfig, run_loso, train_loop

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "EnergyModel",
    "Network",
    "NetworkSpec",
    "Tensor",
    "TrainConfig",
    "build_attention",
    "build_cnn",
    "build_leaky_kernel",
    "build_snn",
    "exact_lif_solve",
    "iterative_lif_forward",
    "load_model",
    "measure_spike_rates",
    "nilif_forward",
    "profile_static",
    "run_loso",
    "save_model",
    "train_loop",
    "transfer_weights_cnn_to_snn",
]
