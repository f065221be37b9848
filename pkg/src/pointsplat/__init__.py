"""pointsplat: differentiable multi-channel gaussian splatting for point clouds."""

__version__ = "0.1.0"

from .errors import (CameraValidationError, CheckpointError, CulledPointError,
                     DegenerateCovarianceError, DegenerateRotationError,
                     FitDivergenceError, PlyParseError, PointsplatError)
from .geometry import (LOWPASS_DILATION, NEAR_PLANE, CameraModel, Covariance2,
                       Covariance3, build_covariance3d, project_covariance,
                       project_point, projection_jacobian, quat_multiply,
                       quat_to_rotation)
from .primitives import (DEFAULT_FEATURE_DIM, ActivatedGaussian,
                         ActivatedGaussians, GaussianPrimitive, PointCloud,
                         RawGaussians, activate_params, downsample_uniform)
from .rasterizer import (ALPHA_CLAMP, ContributionLog, RasterConfig,
                         RenderBuffers, alpha_blend, evaluate_gaussian2d,
                         render, render_reference)
from .grad import (GradCheckReport, ParamGradients, finite_diff_check,
                   render_backward)
from .losses import (LossWeights, PredictionPyramid, default_loop_weights,
                     downsample_image, frequency_loss, l1_loss,
                     progressive_multiscale_frequency_loss,
                     progressive_multiscale_image_loss, psnr, total_loss)
from .fit import (AdamState, FitConfig, FitReport, fit_features,
                  fit_gaussians, init_from_cloud, optimizer_step)
from .storage import (load_cameras, load_checkpoint, load_float_sidecar,
                      load_image, load_point_cloud, save_cameras,
                      save_checkpoint, save_feature_planes,
                      save_float_sidecar, save_image, save_point_cloud)
from .cli import cli_main
