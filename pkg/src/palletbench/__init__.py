"""Synthetic warehouse-pallet datasets: generation, degradation, evaluation.

The pipeline runs end to end without any trained model: `scenegen` draws
randomised pallet scenes and rasterises them with pixel-accurate instance
masks, `photometric` produces brightness-degraded variants, `coco` holds
the dataset interchange format plus a defect-reporting validator, and
`evaluate`/`experiment` score predictions (mAP50, grouped by class or
pallet arrangement) and orchestrate darkening sweeps and grid searches
over external commands. `palletbench.cli` exposes every stage as a
scriptable subcommand.
"""

from .coco import (
    Annotation,
    CategoryRecord,
    CocoFormatError,
    Dataset,
    Defect,
    ImageRecord,
    PredictedInstance,
    PredictionFormatError,
    PredictionSet,
    ValidationReport,
    canonical_json_bytes,
    merge_datasets,
    parse_dataset,
    parse_predictions,
    serialize_dataset,
    serialize_predictions,
    validate_dataset,
)
from .evaluate import (
    EvalConfig,
    EvalReport,
    StabilityReport,
    evaluate,
    stability_compare,
)
from .experiment import (
    CurveTable,
    GridSpec,
    MockDetectorConfig,
    RunManifest,
    collect_results,
    darkening_sweep,
    expand_grid,
    mock_detect,
    select_best,
)
from .maskgeom import (
    PolygonSet,
    Rle,
    instance_iou,
    mask_iou,
    mask_to_polygons,
    rasterize_polygons,
    rle_decode,
    rle_encode,
)
from .photometric import (
    darken_dataset_random,
    darken_dataset_static,
    darken_static,
    load_image,
    mean_brightness,
    save_image,
)
from .rng import SplitMix64, derive_seed, seed_stream
from .scenegen import (
    Camera,
    RandomisationConfig,
    SceneSpec,
    export_dataset,
    generate_batch,
    generate_scene,
    rasterize_scene,
)

__version__ = "0.1.0"
