"""Temporal depth densification from a low-rate sparse depth sensor.

Dense depth for every RGB frame of a video stream, given sparse depth
measurements on only a subset of frames, via epipolar correlation,
iterative multi-modal refinement and convex upsampling.
"""

from .geometry import (
    CameraIntrinsics,
    DepthMap,
    PixelCoord,
    RigidPose,
    SparseDepthMap,
    backproject,
    project_point,
    project_points,
    reproject_sparse_depth,
)
from .encoding import (
    CorrelationVolume,
    DescriptorEncoder,
    FeatureGrid,
    HypothesisSet,
    MonocularPyramid,
    build_correlation_volume,
    correlation_score,
)
from .integrator import (
    AnalyticOperator,
    IntegrationInputs,
    IntegratorState,
    depth_delta,
    init_depth,
    run,
    step,
)
from .decoder import convex_upsample, softmax_masks, uniform_masks, upsample_to_full
from .evaluation import (
    Mesh,
    Metrics2D,
    Metrics3D,
    TSDFVolume,
    brute_force_nn,
    extract_mesh,
    metrics_2d,
    metrics_3d,
    nearest_distances,
    save_ply,
    tsdf_integrate,
)
from .scene import (
    Billboard,
    Plane,
    SceneSpec,
    Slab,
    Sphere,
    SphereCap,
    Trajectory,
    generate_sequence,
    perturb_pose,
    render_color,
    render_depth,
    sample_sparse,
)
from .training import LossConfig, TrainSample, augment, gradient_check, sequence_loss, train_toy
from .harness import RunConfig, RunReport, load_sequence, run_pipeline, save_sequence, sweep

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
