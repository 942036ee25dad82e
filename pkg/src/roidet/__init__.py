"""Single-shot hip ROI detection toolkit.

Dataset statistics, data-driven anchor design, a compact single-predictor
detector trained with focal loss, and the full IoU/AP50 evaluation grid,
plus a browser annotation workflow.
"""

__version__ = "0.1.0"

from .anchors import (  # noqa: F401
    AnchorLayerSpec,
    AnchorSet,
    ScaleSpec,
    build_grid,
    coverage,
    expand_scales,
    recommend_scales,
)
from .dataset import (  # noqa: F401
    AnnotationDocument,
    AugmentConfig,
    DatasetStats,
    augment,
    compute_stats,
    load_annotations,
    preprocess,
)
from .detector import DetectorConfig, DetectorModel, build_detector  # noqa: F401
from .evaluation import (  # noqa: F401
    MetricsReport,
    Prediction,
    ap50,
    match_for_metrics,
    nms,
    predict,
    report,
    run_experiment_grid,
)
from .geometry import Box, PadResizeTransform, iou, make_transform, map_box  # noqa: F401
from .phantoms import PhantomConfig, synth_generate  # noqa: F401
from .training import (  # noqa: F401
    FocalConfig,
    OptimizerConfig,
    ScheduleConfig,
    TrainConfig,
    decode_box,
    detection_loss,
    encode_box,
    focal_loss,
    lr_at,
    match_anchors,
    train,
)
