"""pix2affect: binary arousal classification from raw gameplay video pixels.

The package covers the full pipeline: continuous annotation traces are
min-max normalized, aligned to 30 Hz frames by holding the last annotated
value, and binarized against each trace's own mean with an optional
uncertainty zone; grayscale 72x128 frame stacks are cut into non-overlapping
8-frame segments; three compact CNNs (single-frame 2D, frames-as-channels
2D, and true 3D convolution) are trained from scratch with Adam and early
stopping under leave-one-video-out cross-validation; gradient-based class
activation maps localize what drives each prediction. A seeded synthetic
corpus with a planted HUD-style arousal signal makes the whole loop
verifiable end to end.
"""

from ._malloc import enable_large_alloc_reuse as _enable_large_alloc_reuse

_enable_large_alloc_reuse()

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    NumericError,
    ParseError,
    PixelAffectError,
    ShapeError,
    TrainingError,
)
from .tensors import (
    FLOAT,
    GradCheckReport,
    Rng,
    finite_difference_check,
    fnv1a64,
    reshape,
    tensor_new,
    tensor_rand_uniform,
)
from .models import (
    LayerSpec,
    ModelParams,
    ModelSpec,
    build_architecture,
    count_parameters,
    flatten_width,
    infer_shapes,
    init_params,
)
