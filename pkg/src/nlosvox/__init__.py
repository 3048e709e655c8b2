"""Non-line-of-sight reconstruction by transient back-projection.

Two reconstruction methods share one dataset model:

* :func:`reconstruct_traditional` evaluates every voxel against every
  (shot, pixel) histogram;
* :func:`reconstruct_fast` voxelizes one tessellated spheroid per non-zero
  space-time sample.

Hot loops run in a compiled extension when available and fall back to numpy
otherwise (see :data:`BACKEND`).
"""

__version__ = "0.1.0"

from ._backend import BACKEND, available as available_backends
from .backprojection import (
    ReconstructionConfig,
    ReconstructionStats,
    auto_bounds,
    ellipsoid_table,
    reconstruct,
    reconstruct_fast,
    reconstruct_pipeline,
    reconstruct_traditional,
)
from .errors import (
    ConfigConflictError,
    DegenerateDistanceError,
    DegenerateEllipsoidError,
    FormatError,
    GeometryMismatchError,
    IntegerOverflowError,
    MalformedMagicError,
    NegativeIntensityError,
    NlosError,
    ResolutionOverflowError,
    ResourceLimitError,
    SceneError,
    SceneParseError,
    SceneSemanticError,
    TimeBudgetError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    ValidationError,
)
from .formats import (
    export_ply,
    export_slices,
    parse_scene,
    read_dataset,
    read_scene,
    read_volume,
    write_dataset,
    write_report,
    write_volume,
)
from .geometry import (
    ProlateSpheroid,
    SphereAtlas,
    TessellatedSphere,
    build_sphere_atlas,
    ellipsoid_from_measurement,
    select_tessellation_level,
    shell_overlap_oracle,
    transform_triangles,
)
from .transient import (
    SPEED_OF_LIGHT,
    HiddenScene,
    LaserSampling,
    SurfaceSamples,
    TemporalAxis,
    TimeSpec,
    TransientDataset,
    WallGrid,
    WallSampling,
    bin_to_time,
    geometric_attenuation,
    path_time,
    rectangle_samples,
    simulate_dataset,
    three_bounce_time,
    time_to_bin,
)
from .voxelizer import (
    Comparison,
    VoxelGrid,
    grid_compare,
    grid_new,
    laplacian_filter,
    quantize_weights,
    rasterize_triangle,
    rasterize_triangles,
    splat_batch,
    splat_ellipsoid,
)
