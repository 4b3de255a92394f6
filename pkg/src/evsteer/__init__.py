"""Energy-driven fusion of frame and event features for steering prediction.

Subpackages:
  tensor   float64 autodiff engine + finite-difference gradient oracle
  events   event simulation from frame pairs and time-window binning
  fusion   energy-weighted cross-modality fusion block and ablation baselines
  losses   energy-score loss (full/fast estimators), closed form, smooth L1
  model    dual-stream backbone, stage fusion taps, uncertainty decoder
  data     synthetic driving scenario generator, balancing filters, splits
  harness  training/eval/ablation orchestration behind the ``evsteer`` CLI
"""

from .tensor import RngState, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "RngState", "backward", "grad_check", "__version__"]
