"""Spatiotemporal image-to-LiDAR pretraining toolkit.

Calibration-driven projection, superpixel/superpoint association with
cross-view class unification, multi-sweep aggregation, contrastive and
consistency objectives with analytic gradients, a deterministic toy
pretraining loop on synthetic scenes, and temporal-voting segmentation
post-processing.
"""

from .containers import (ContainerError, FeatureMap, LabelMap, SemanticScores,
                         UNLABELED)
from .embedding import (EmbeddingMatrix, PointEncoder, ProjectionHead,
                        bilinear_upsample, encode_points, l2_normalize_rows,
                        project_and_normalize)
from .geometry import (CalibratedCamera, CameraIntrinsics, PointCloud,
                       Projections, RigidTransform, aggregate_sweeps, compose,
                       project_points, transform_cloud, unproject)
from .losses import (CompositeBatch, CompositeResult, LossResult, LossWeights,
                     composite_objective, d2s_loss, info_nce)
from .superpoints import (AlignResult, SuperpointIndex, align_views,
                          build_superpoints, match_regions, pool_by_group,
                          pool_by_label_map)
from .synthetic import (SceneConfig, SyntheticScene, generate_scene,
                        synthetic_scores)
from .trainer import (TrainConfig, TrainState, build_training_batch,
                      load_checkpoint, save_checkpoint, train_step)
from .voting import IoUResult, NeighborIndex, VoteConfig, VoteFrame, miou, vote

__version__ = "0.1.0"
