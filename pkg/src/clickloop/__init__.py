"""Interactive multi-person keypoint annotation: an end-to-end detector whose
decoder accepts user clicks, plus pose-error training, metrics and a service.
"""

from .core import (
    BUNDLED_SKELETONS,
    COCO_17,
    COCO_21,
    BoundingBox,
    Dataset,
    ImageRecord,
    PersonInstance,
    Pose,
    Skeleton,
    Visibility,
    denormalize,
    flip_labels,
)
from .checkpoint import (
    CheckpointFormatError,
    SkeletonMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    DegenerateBoxError,
    ErrorConfig,
    ErrorTag,
    ErrorizedPose,
    build_error_queries,
    inject_inversion,
    inject_jitter,
    inject_miss,
    inject_swap,
    miss_floor,
)
from .evaluation import (
    ApReport,
    EvalConfig,
    ExhaustedError,
    ModelEngine,
    NocReport,
    SimulationReport,
    UndefinedOksError,
    bind_predictions,
    compute_ap,
    compute_oks,
    evaluate_model,
    noc_at,
    select_click,
    sensitivity_probe,
    simulate_annotation,
    timing_benchmark,
)
from .losses import LossBundle, LossTerms, loss_detection, loss_loop, loss_reconstruction
from .matching import (
    Assignment,
    CostWeights,
    InfeasibleMatchError,
    build_cost_matrix,
    hungarian_match,
)
from .model import (
    FeatureMap,
    HumanQuerySet,
    KeypointDetector,
    KeypointQuerySet,
    ModelConfig,
    Predictions,
    QueryOrigin,
    embed_labels,
    prepare_images,
)
from .session import (
    AnnotationSession,
    ClickEvent,
    EmptyPoseError,
    SessionStateError,
    regularize_box,
)
from .synth import GenerationError, SynthConfig, generate_synthetic_dataset
from .train import (
    TrainConfig,
    TrainingDivergedError,
    TrainResult,
    train,
)

__version__ = "0.1.0"
