"""Instance-segmentation postprocessing and correlation-matrix evaluation for
XXL-CT volumes, with synthetic phantoms as ground truth."""

from .evaluate import (
    DEFAULT_MIN_SEGMENT_VOXELS,
    CorrelationMatrix,
    DiagonalStats,
    GroupStats,
    build_correlation_matrix,
    cc_postprocess_proposal,
    compute_iou,
    diagonal_stats,
    export_matrix,
    export_stats,
)
from .fusion import (
    GlobalIndexMap,
    MatchConfig,
    SliceStack,
    close_line_artefacts,
    load_stack,
    match_slices,
    reinsert_2d_segments,
    run_fusion_pipeline,
    save_stack,
)
from .instancer import WatershedConfig, extract_markers, run_watershed_pipeline, watershed_instances
from .labels import (
    SegmentReport,
    SegmentTable,
    close,
    connected_components,
    count_segments,
    dilate,
    erode,
    morphology,
    segment_table,
)
from .phantom import (
    ObjectSpec,
    PhantomError,
    PhantomSpec,
    corrupt_stack,
    generate_phantom,
    perfect_slice_stack,
    random_phantom_spec,
)
from .preprocess import labels_to_three_class, rof_objective, tv_denoise
from .tiling import Block, BlockTiling, blockwise_apply, make_tiling
from .volume import (
    Volume,
    VolumeFormatError,
    VolumeMeta,
    extract_slice,
    insert_slice,
    load_volume,
    save_volume,
)

__version__ = "0.1.0"
