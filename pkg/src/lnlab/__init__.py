"""NumPy reference implementation of Post-LN, Pre-LN and bottom-to-top
connected transformers, with the gradient and similarity diagnostics used to
compare them."""

from .autodiff import Tensor, backward, grad_check, no_grad, tensor
from .diagnostics import decay_fit, layer_gradient_norms, layer_output_cosine_matrix, location_gradient_norms
from .model import Batch, ModelConfig, build_model, forward_loss, load_checkpoint, save_checkpoint
from .nn import Variant, alpha_coeff, beta_coeff
from .train import TaskSpec, TrainConfig, train_run

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "grad_check",
    "no_grad",
    "Variant",
    "alpha_coeff",
    "beta_coeff",
    "ModelConfig",
    "Batch",
    "build_model",
    "forward_loss",
    "save_checkpoint",
    "load_checkpoint",
    "TaskSpec",
    "TrainConfig",
    "train_run",
    "layer_gradient_norms",
    "location_gradient_norms",
    "layer_output_cosine_matrix",
    "decay_fit",
]
