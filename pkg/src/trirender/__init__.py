"""Neural triangle renderer: scenes in, HDR radiance out.

The package covers the full loop: procedural scene generation, a reference
path tracer for ground truth, a two-stage transformer that renders triangle
soups directly, and the training/evaluation harness plus CLI that tie them
together.
"""

from .errors import (
    CheckpointError,
    GenerationError,
    NumericalError,
    SceneParseError,
    ShapeError,
    TriRenderError,
    ValidationError,
)
from .generator import GenConfig, audit_scene, rotate_augment, sample_scene
from .hdr import HdrImage, composite_lights, psnr, read_pfm, tone_map, write_pfm, write_png
from .model import ModelConfig, ModelWeights, attention_maps, render
from .oracle import path_trace
from .scene import (
    Camera,
    Material,
    Scene,
    Triangle,
    load_scene,
    make_camera,
    save_scene,
    transform_scene,
    validate_scene,
)
from .tensor import Tensor, default_dtype
from .training import (
    Checkpoint,
    TrainConfig,
    generate_dataset,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Checkpoint",
    "CheckpointError",
    "GenConfig",
    "GenerationError",
    "HdrImage",
    "Material",
    "ModelConfig",
    "ModelWeights",
    "NumericalError",
    "Scene",
    "SceneParseError",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "TriRenderError",
    "Triangle",
    "ValidationError",
    "attention_maps",
    "audit_scene",
    "composite_lights",
    "default_dtype",
    "generate_dataset",
    "load_checkpoint",
    "load_scene",
    "make_camera",
    "path_trace",
    "psnr",
    "read_manifest",
    "read_pfm",
    "render",
    "rotate_augment",
    "sample_scene",
    "save_checkpoint",
    "save_scene",
    "tone_map",
    "train_loop",
    "transform_scene",
    "validate_scene",
    "write_pfm",
    "write_png",
]
