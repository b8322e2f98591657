"""compolab: a desk-scale lab for compositional image-caption representation learning.

The package couples a tiny reverse-mode autodiff engine with a synthetic
compositional scene world, toy dual encoders plus a frozen caption decoder,
composite training objectives (hard-negative contrastive, token
reconstruction, paraphrase alignment), a ranking evaluation harness, and a
reproducible experiment CLI.
"""

__version__ = "0.1.0"

from . import tensor
from .gradcheck import GradCheckReport, grad_check
from .tensor import Tensor, backward, no_grad

__all__ = ["tensor", "Tensor", "backward", "no_grad", "grad_check", "GradCheckReport", "__version__"]
