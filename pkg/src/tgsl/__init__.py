"""Time-aware graph structure learning on continuous-time dynamic graphs.

A plain-numpy implementation: a minimal reverse-mode autodiff core, a
temporal event-store data layer, a temporal-attention reference encoder,
the structure learner (edge-centric message passing, LSTM context
prediction, candidate sampling, time mapping, Gumbel-Top-K selection), and
momentum-contrast multi-task training with temporal link prediction
evaluation.
"""

from . import autodiff, encoder, graph, structure, training, verify
from .autodiff import (AdamState, GradCheckResult, Tape, Tensor, adam_step,
                       backward, grad_check, no_grad, verification_mode)
from .encoder import (EncoderParams, NodeEmbedding, TgatEncoder,
                      TimeEncodingConfig, time_context, time_encode)
from .graph import (EventStore, NeighborIndex, SplitSpec, TemporalEvent,
                    chronological_split, khop_sample, load_events,
                    neighbors_before, sample_negatives, save_events,
                    sparsify, synth_generate)
from .structure import (AugmentedView, CandidateEdge, StructureLearner,
                        TgslParams, build_augmented_view, context_predict,
                        etgnn_forward, gumbel_topk_select, sample_candidates,
                        time_map)
from .training import (EarlyStopState, MetricsReport, MoCoState, Trainer,
                       TrainConfig, average_precision, bce_link_loss,
                       early_stop_update, info_nce_loss, moco_step)

__version__ = "0.1.0"
