"""Fairness-aware two-level training for embedding-enhanced recommenders."""

from .baselines import BaselineWeights, groupdro_update, reweight_weights, train_baseline
from .bilevel import (TrainConfig, TrainDivergedError, TrainedModel, fd_second_order,
                      inner_step, outer_hypergradient, train)
from .dataio import (Dataset, GroupAssignment, PreprocessConfig, RawInteractions,
                     assign_attribute_groups, assign_popularity_groups, load_interactions,
                     load_item_metadata, preprocess)
from .embed import (SemanticMatrix, SynthEmbedConfig, load_embeddings, save_embeddings,
                    synth_embeddings, user_representation)
from .evalmetrics import (RankingResult, ReportOptions, UtilityVector, build_report, cv,
                          epsilon_if, group_utilities, group_utility, hr_at_k, min_bottom,
                          ndcg_at_k, rank_topk, recall_at_k, write_report)
from .fairloss import (GradientAtomSet, GroupLossVector, SimplexWeights, build_atom_set,
                       entropy_gradient, fair_direction, frank_wolfe, group_loss_vector,
                       softmax_entropy)
from .recmodel import (Batch, EvalCounter, FlatGrad, ProjectorParams, infonce_loss,
                       init_projector, loss_grad_theta, loss_grad_z, project, score)

__version__ = "0.1.0"
