"""Compressed task vectors: learnable sparsification, adaptive bit-widths,
a grouped sparse bitstream, and per-input dynamic merging."""

from .bitwidth import (BitLogits, CANDIDATE_WIDTHS, QuantSpec, bit_regularizer,
                       bit_weights, mean_bitwidth, mixed_quantize, quantize,
                       quantize_indices, select_bitwidth)
from .codec import (CapacityError, CodecError, CorruptStreamError,
                    EncodedModule, Format, choose_format, decode, encode,
                    encode_dense, encode_indep, expected_bits, optimal_group)
from .container import (SparseModule, SparseTaskVector, load_bundle,
                        load_container, load_params, save_bundle, save_params,
                        sparse_from_decoded, streams_from_switch)
from .gating import (GateOutput, GateParams, harden, soft_gate, sparsity_loss,
                     temperature_schedule)
from .harness import (SyntheticTaskSpec, TaskData, base_dataset,
                      baseline_merge, evaluate_tasks, fine_tune, gen_tasks,
                      probe_precision, probe_scale, probe_sparsity,
                      read_dataset, write_dataset)
from .losses import (DEFAULT_LAMBDA, LAMBDA_PRESETS, cka_loss, kl_loss,
                     mse_loss, preservation_loss)
from .merging import (ReferenceIndex, build_index, build_query_set, kmeans,
                      knn_weights, load_index, merged_forward, save_index,
                      train_metric)
from .model import MlpSpec, accuracy, features, forward, init_params, predict
from .switch import (SwitchModule, TaskSwitch, apply_switch, build_switch,
                     pulse_mask, switch_scale, switch_values)
from .training import (CompressedModule, CompressedTaskVector, TrainConfig,
                       TrainResult, TrainingDivergedError, apply_compressed,
                       train)
from .vectors import (ParamSet, SignedBounds, StructureError, TaskVector, add,
                      diff, sign_quantile, signed_bounds)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
