"""Joint audio-motion flow matching at toy scale."""

from ._core import (
    JamflowError,
    Model,
    ModelConfig,
    NumericError,
    default_config,
    evaluate,
    generate_sample,
    inpaint_mask,
    joint_mask,
    normalize_config,
    read_sequences,
    rope_angles,
    train,
    write_sequences,
)

__all__ = [
    "JamflowError",
    "Model",
    "ModelConfig",
    "NumericError",
    "default_config",
    "evaluate",
    "generate_sample",
    "inpaint_mask",
    "joint_mask",
    "normalize_config",
    "read_sequences",
    "rope_angles",
    "train",
    "write_sequences",
]
