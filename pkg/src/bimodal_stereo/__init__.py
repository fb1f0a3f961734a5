"""Joint shape and pose recovery from one colour image and one depth map of a different view."""

from .core import (
    DepthGrid,
    LogShadingImage,
    NormalField,
    PointCloud,
    SimilarityPose,
    angular_error,
    apply_pose,
    depth_to_normals,
    depth_to_pointcloud,
    euler_to_matrix,
    matrix_to_euler,
    rotate_normals,
)
from .integrate import GradientField, IntegrationError, integrate_gradients, normals_to_gradients
from .lighting import (
    STANDARD_LIGHTING,
    LightingPrior,
    SHLighting,
    build_m_matrices,
    lighting_prior_cost,
    render_log_shading,
)
from .pipeline import PipelineConfig, PipelineRegistrationError, PipelineResult, run_bimodal_stereo
from .refine import RefineConfig, refine_depth, refine_normals
from .registration import (
    CorrespondenceSet,
    MeshSurface,
    RansacConfig,
    RegistrationConfig,
    RegistrationError,
    build_correspondences,
    decompose_rotation,
    fit_rst_linear,
    icp_align,
    ransac_rst,
    register,
    rotation_error,
)
from .sfs import ConvergenceWarning, PriorField, SfsConfig, sfs_residuals, solve_field, solve_pixel
from .synth import (
    SynthSpec,
    face_surface,
    run_sweep,
    select_prior_pixels,
    standard_lighting,
    synthesize_pair,
)

__version__ = "0.1.0"
