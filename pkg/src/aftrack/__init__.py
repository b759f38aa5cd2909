"""Anchor-free siamese tracker with object-aware classification.

Library layout:

- `tensor`: numpy autodiff core (closed op set, finite-difference checking)
- `geometry`: boxes, score grid, label maps, box decoding
- `align`: box-conditioned sampling offsets and the aligned convolution
- `network`: backbone, multi-dilation feature combination, heads, weight IO
- `losses`: IoU regression loss, balanced BCE, total objective
- `tracker`: crop pipeline, score fusion, penalties, per-frame stepping
- `synth`: deterministic synthetic sequences and PPM storage
- `train`: SGD with warmup/decay schedule over synthetic pairs
- `evaluation`: overlap/precision/robustness metrics and reports
- `config` / `cli`: flat key=value run configs and the command-line front end
"""

from .errors import (
    AftrackError,
    ArtifactError,
    ConfigError,
    DegenerateInputError,
    NumericError,
    ShapeError,
    TrainingDiverged,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "AftrackError",
    "ArtifactError",
    "ConfigError",
    "DegenerateInputError",
    "NumericError",
    "ShapeError",
    "TrainingDiverged",
    "UsageError",
    "__version__",
]
