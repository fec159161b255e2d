"""proxyattn: 2D-to-3D pose lifting with a learned pose-proxy attention model.

Library layout:
  tensor     float64 tensors + reverse-mode autodiff tape
  rng        seeded sampling (gaussian / laplacian / uniform)
  gradcheck  central finite-difference gradient verification
  tensor_io  sidecar+binary tensor files
  model      the proxy-bank lifter architecture
  metrics    losses, mpjpe / p-mpjpe / pck / auc, Procrustes, 3x3 SVD
  data       skeletons, synthetic motion, flips, windows, manifests
  trainer    AdamW, training loop, evaluation, checkpoints
  cli        the `proxyattn` command
"""

from .gradcheck import finite_diff_check, finite_diff_report
from .metrics import (LossWeights, SimilarityTransform, auc, loss_3d,
                      metric_report, mpjpe, p_mpjpe, pck, procrustes_align,
                      svd_3x3, tc_loss, total_loss)
from .model import (ForwardOutput, LayerTrace, ModelConfig, ProxyLifter,
                    aggregate_attention, init_proxy, param_count,
                    zero_residual_paths)
from .rng import Rng, sample
from .tensor import (InvariantError, Parameter, ShapeError, Tape, Tensor,
                     backward)
from .trainer import (AdamW, TrainConfig, TrainingDiverged, build_windows,
                      checkpoint_load, checkpoint_save, evaluate, train)

__version__ = "0.1.0"
