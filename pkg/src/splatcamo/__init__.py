"""splatcamo: Gaussian-splat scenes, a differentiable splat renderer, and
min-max adversarial camouflage optimization against a bundled toy detector.

The pipeline: fit or generate a scene of 3D Gaussians, train a small
detector on its rendered views, then recolor the object Gaussians (zero-
order color coefficients only) so the detector stops finding the object
from every viewpoint — under background counter-perturbations, random
capture transforms, and printability constraints.
"""

from .errors import (InvalidParameterError, MissingTraceError,
                     NotDifferentiableError, ParseError, SchemaError,
                     TrainingFailedError)
from .scene import (Gaussian3D, GaussianScene, ZeroOrderView, eval_sh_color,
                    rgb_to_zero_order, sh_basis, sh_coeff_count, zero_order_view)
from .camera import CameraView, Intrinsics, make_viewpoint
from .ply import load_scene, save_scene
from .render import (RenderOutput, Splat2D, backward_color_gradient,
                     backward_sh_gradient, composite_detect_image,
                     project_gaussian, render, render_object_mask)
from .detector import (BBox, Detection, DetectorArch, DetectorModel,
                       GroundTruth, LabeledImage, RawDetections, RawGrad,
                       TrainConfig, detect, input_gradient, iou,
                       load_detector, save_detector, train_toy_detector)
from .reconstruct import (FitConfig, PosedImage, consistency_regularizers,
                          fit_scene, random_init_scene)
from .attack import (AttackConfig, AttackLog, BackgroundPerturbation,
                     ColorPalette, EotRanges, LossBreakdown,
                     PrintableColorSet, TransformSample, ViewState,
                     anchor_regularizer, background_maximize, build_palette,
                     camouflage_step, collect_background_pixels,
                     color_regularizer, detection_loss, eot_apply,
                     eot_apply_vjp, eot_sample, nps, run_attack, total_loss,
                     total_loss_gradient)
from .evaluate import (EvalReport, ViewGrid, ap_at_05, bbox_from_mask,
                       evaluate, generate_view_grid, recolor_background)
from .dataset import (build_detection_dataset, load_detection_dataset,
                      load_posed_images, render_posed_images,
                      save_detection_dataset, save_posed_images)
from .toyscene import make_toy_scene, toy_intrinsics, toy_view_grid
from . import kernels

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackLog", "BBox", "BackgroundPerturbation",
    "CameraView", "ColorPalette", "Detection", "DetectorArch",
    "DetectorModel", "EotRanges", "EvalReport", "FitConfig", "Gaussian3D",
    "GaussianScene", "GroundTruth", "Intrinsics", "InvalidParameterError",
    "LabeledImage", "LossBreakdown", "MissingTraceError",
    "NotDifferentiableError", "ParseError", "PosedImage",
    "PrintableColorSet", "RawDetections", "RawGrad", "RenderOutput",
    "SchemaError", "Splat2D", "TrainConfig", "TrainingFailedError",
    "TransformSample", "ViewGrid", "ViewState", "ZeroOrderView",
    "anchor_regularizer", "ap_at_05", "backward_color_gradient",
    "backward_sh_gradient", "background_maximize", "bbox_from_mask",
    "build_detection_dataset", "build_palette", "camouflage_step",
    "collect_background_pixels", "color_regularizer",
    "composite_detect_image", "consistency_regularizers", "detect",
    "detection_loss", "eot_apply", "eot_apply_vjp", "eot_sample",
    "eval_sh_color", "evaluate", "fit_scene", "generate_view_grid",
    "input_gradient", "iou", "kernels", "load_detection_dataset",
    "load_detector", "load_posed_images", "load_scene", "make_toy_scene",
    "make_viewpoint", "nps", "project_gaussian", "random_init_scene",
    "recolor_background", "render", "render_object_mask",
    "render_posed_images", "rgb_to_zero_order", "run_attack",
    "save_detection_dataset", "save_detector", "save_posed_images",
    "save_scene", "sh_basis", "sh_coeff_count", "total_loss",
    "total_loss_gradient", "toy_intrinsics", "toy_view_grid",
    "train_toy_detector", "zero_order_view",
]
