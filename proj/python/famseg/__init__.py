"""Python bindings for the famseg C++ library."""

from ._core import (
    Model,
    gradcheck,
    generate,
    iou,
    lr_fit,
    parse_config,
    strip_param_count,
)

__all__ = ["Model", "gradcheck", "generate", "iou", "lr_fit", "parse_config", "strip_param_count"]
