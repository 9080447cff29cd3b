"""Few-shot incremental 3D object detection: geometry, VLM pseudo-label
mining, confidence weighting, gated prototype imprinting and evaluation."""
from .assignment import assign_centers
from .errors import *  # noqa: F401,F403
from .evaluation import Detection, MetricsReport, average_precision, map_report, match_detections
from .gating import GateParams, SupportScene, fuse_scores, gate_forward, imprint_session, train_gates
from .geometry import Box3, diou3d, fit_box, iou3d, nms, points_in_box
from .losses import (
    aux_total,
    bce_dice_objectness,
    cosine_alignment_loss,
    incremental_loss,
    weighted_diou_regression,
)
from .presets import PRESETS, get_preset
from .prototypes import PrototypeStore, class_scores, update_prototype
from .session import (
    ProtocolConfig,
    SessionState,
    load_state,
    run_base_session,
    run_incremental_session,
    run_protocol,
    save_state,
    supervised_pseudo_iou,
)
from .synth import WorldConfig, generate_scene, oracle_features, render_frames
from .vlm_ingest import (
    CameraModel,
    MiningConfig,
    MiningStats,
    PseudoObject,
    VlmFrame,
    lift_mask,
    mine_unknown_objects,
)
from .weighting import WeightField, box_weight, combined_weights, point_weight

__version__ = "0.1.0"
