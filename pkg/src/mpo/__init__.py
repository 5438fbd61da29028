"""Multi-point optimization: train many neural-network weight vectors at
once by constraining them to a trainable 2D plane in parameter space, so
their loss values form a prescribed binary pattern; evaluate and render
the resulting loss/accuracy landscapes."""

from .datasets import (Batches, Dataset, downsample_images, load_cifar10,
                       load_idx, make_synthetic)
from .errors import (ConfigError, DegenerateDirectionError, DiffUndefinedError,
                     InputError, MpoError, ParseError, ShapeError,
                     SnapshotError)
from .landscape import (BlackWhiteMetrics, GridExtent, GridResult,
                        black_white_metrics, eval_grid, grid_correlation,
                        render_heatmap)
from .models import (build_preset, conv_classifier, mlp, spec_from_json,
                     spec_hash, spec_to_json, tiny_conv)
from .nn import (AdaptiveAvgPool, Batch, BatchNorm, BNState, Conv2D, Dense,
                 Flatten, ModelSpec, ReLU, batchnorm_forward, forward,
                 init_weights, loss_and_grad, loss_and_grad_many, param_count,
                 softmax)
from .patterns import (CellSets, Mask, checkerboard_mask, derive_cell_sets,
                       downsample_threshold, gen_random_mask, load_mask,
                       save_mask)
from .plane import (CellCoord, PlaneGrads, PlaneParams, materialize,
                    materialize_many, orthogonalize, pullback)
from .snapshot import load_plane, save_plane
from .training import (AdamState, ObjectiveResult, TrainConfig, TrainReport,
                       adam_step, init_plane, mpo_objective, sample_cells,
                       train)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
