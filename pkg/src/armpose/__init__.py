"""Camera-to-robot pose and joint-configuration estimation.

The pipeline: a regressor (or an oracle) turns 2D keypoints into pairwise
skeleton distances, classical multidimensional scaling and anchor alignment
recover the joint configuration, EPnP plus a single-link scale gives the
camera pose, and a silhouette-overlap search refines everything jointly.
"""

from .datagen import (
    DatasetFormatError,
    SamplerConfig,
    Scene,
    SceneGenerationError,
    build_scene,
    generate_dataset,
    load_scene_mask,
    look_at,
    perturb_keypoints,
    project_keypoints,
    read_dataset,
    sample_scene,
    skeleton_keypoints,
    write_dataset,
)
from .distgeo import (
    AdamState,
    AlignmentDegenerateError,
    ConfigurationAmbiguousWarning,
    MlpRegressor,
    NonEmbeddableWarning,
    TrainConfig,
    TrainingDivergedError,
    align_points,
    anchor_indices,
    configuration_from_points,
    edm_from_configuration,
    edm_from_points,
    frobenius_loss,
    gram_from_edm,
    init_regressor,
    keypoint_features,
    load_regressor,
    mlp_forward,
    mlp_gradients,
    points_from_gram,
    save_regressor,
    train_gim,
)
from .kinematics import (
    JointSpec,
    KinematicChain,
    PointSet,
    RigidTransform,
    builtin_chain,
    check_configuration,
    dh_transform,
    forward_kinematics,
    joint_points,
    load_chain,
    rotation_geodesic,
    wrap_angle,
)
from .metrics import (
    EvalRecord,
    add_metric,
    auc,
    build_report,
    mae_config,
    write_report_csv,
    write_report_json,
)
from .poseinit import (
    CameraIntrinsics,
    InsufficientCorrespondencesError,
    Keypoints2D,
    PnpDegenerateError,
    ScaleUndefinedError,
    epnp,
    initial_estimate,
    load_keypoints,
    scale_factor,
    translation_from_scale,
)
from .refine import (
    Estimate,
    EstimateUpdate,
    RefinerConfig,
    apply_update,
    config_loss,
    grad_normalize,
    load_estimate,
    matrix_to_rot6d,
    pose_loss,
    refine,
    rot6d_to_matrix,
    save_estimate,
)
from .silhouette import (
    Mesh,
    RenderSettings,
    bresenham_line,
    default_link_meshes,
    draw_segment,
    load_obj,
    load_pointcloud_json,
    pose_mesh,
    read_pgm,
    render_chain_silhouette,
    render_link_clouds,
    render_silhouette,
    sample_link_clouds,
    sample_surface,
    save_obj,
    segment_reference,
    silhouette_iou,
    write_pgm,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
