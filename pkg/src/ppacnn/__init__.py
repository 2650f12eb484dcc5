"""Simulator of a pixel-processor-array vision chip plus a ternary-weight
CNN trainer and inference pipeline built on top of it.

Submodules:

- ``core``       register planes, SIMD instruction set, cost model
- ``block16``    4x4-block 16-bit image format and parallel arithmetic
- ``convengine`` ternary convolution, checkerboard storage, max-pooling
- ``network``    float training with stochastic ternary weights
- ``data``       dataset loading, augmentation, car-scene generator
- ``inference``  ternarization and the simulated end-to-end pipeline
- ``cli``        command-line front end
"""

from .backend import BACKEND, HAS_NUMBA
from .core import (
    ArrayState,
    CoordinateError,
    CostCounter,
    DirectionConflictError,
    DirectionSet,
    PlaneBudgetError,
    SimulationError,
    UnknownPlaneError,
    read_pgm,
    write_pgm,
)
from .block16 import (
    Block16Image,
    SNAKE_ORDER,
    SnakeLayout,
    bitshift_down,
    bitshift_down_run,
    bitshift_up,
    block_add,
    block_sub,
    decode,
    encode,
    sign_mask,
)
from .convengine import (
    CheckerboardStore,
    TernaryKernel,
    anchor_coords,
    checkerboard_maxpool,
    convolve,
    readout_pooled,
    relu_store,
)

__version__ = "0.1.0"

__all__ = [
    "ArrayState",
    "BACKEND",
    "Block16Image",
    "CheckerboardStore",
    "CoordinateError",
    "CostCounter",
    "DirectionConflictError",
    "DirectionSet",
    "HAS_NUMBA",
    "PlaneBudgetError",
    "SNAKE_ORDER",
    "SimulationError",
    "SnakeLayout",
    "TernaryKernel",
    "UnknownPlaneError",
    "anchor_coords",
    "bitshift_down",
    "bitshift_down_run",
    "bitshift_up",
    "block_add",
    "block_sub",
    "checkerboard_maxpool",
    "convolve",
    "decode",
    "encode",
    "read_pgm",
    "readout_pooled",
    "relu_store",
    "sign_mask",
    "write_pgm",
    "__version__",
]
