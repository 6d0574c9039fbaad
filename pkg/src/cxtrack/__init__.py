"""Context-preserving 3D single-object tracking on point clouds.

Both consecutive frames enter the network uncropped; the previous box only
marks the target through a per-point targetness mask. A mask-fusing global
transformer propagates target cues across frames, and a local-attention
proposal head with a Gaussian displacement prior picks the new box.

Built on a from-scratch float64 autodiff core so every gradient in the
system is finite-difference checkable.
"""

from .backbone import FeatureSet, extract_features
from .config import DEFAULTS, load_config, parse_config, dump_config
from .geometry import (Box7, Motion4, PointCloud, apply_motion, iou3d,
                       points_in_box, success_precision)
from .losses import LossWeights, assign_labels, mask_ce, total_loss
from .pipeline import (EvalResult, ModelParams, Settings, TrackResult, evaluate,
                       forward_frame_pair, frame_pair_loss, init_params,
                       load_checkpoint, load_params, save_checkpoint,
                       track_sequence, train)
from .synth import SceneSpec, Sequence, generate_sequence
from .tensor import Graph, Tensor, grad_check
from .transformer import AttentionConfig, transformer_forward
from .xrpn import ProposalSet, forward_xrpn, select_best

__version__ = "0.1.0"
