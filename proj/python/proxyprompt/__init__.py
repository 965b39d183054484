"""Few-shot segmentation with learned proxy prompts."""

from ._ppg import (
    ConfigError,
    Model,
    NumericError,
    ParseError,
    ShapeError,
    UsageError,
    checkable_modules,
    decode_ppgt,
    dice_loss,
    dice_score,
    encode_ppgt,
    generate_episode,
    generate_suite,
    gradcheck,
    iou_score,
    load_tensor,
    save_tensor,
    selective_map,
)

__all__ = [
    "ConfigError",
    "Model",
    "NumericError",
    "ParseError",
    "ShapeError",
    "UsageError",
    "checkable_modules",
    "decode_ppgt",
    "dice_loss",
    "dice_score",
    "encode_ppgt",
    "generate_episode",
    "generate_suite",
    "gradcheck",
    "iou_score",
    "load_tensor",
    "save_tensor",
    "selective_map",
]
