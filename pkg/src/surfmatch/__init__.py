"""Point-cloud correspondence learning and rigid registration toolkit."""

from .geometry import (
    CorrespondenceSet,
    NeighborIndex,
    PointCloud,
    RigidTransform,
    apply_rigid,
    estimate_normals,
    knn,
    random_rigid,
)
from .matcher import (
    AttentionParams,
    MatchResult,
    NetworkParams,
    VisibilityScores,
    apply_visibility_mask,
    cross_attention,
    decode_visibility,
    dual_softmax,
    encode_local_features,
    init_params,
    load_checkpoint,
    match,
    mutual_nn_select,
    save_checkpoint,
    score_matrix,
    self_attention,
)
from .metrics import MetricConfig, inlier_ratio, is_inlier, match_score, registration_error
from .registration import (
    IcpConfig,
    RansacConfig,
    icp_refine,
    kabsch,
    predicted_displacements,
    ransac_rigid,
)
from .synth import (
    DeformationField,
    DeformationParams,
    SamplePair,
    SurfaceMesh,
    add_noise,
    crop_front_surface,
    generate_liver_mesh,
    make_sample_pair,
    simulate_deformation,
    visibility_crop,
)
from .training import (
    TrainConfig,
    backward,
    focal_loss,
    sgd_step,
    total_loss,
    train,
    visibility_loss,
)

__version__ = "0.1.0"
