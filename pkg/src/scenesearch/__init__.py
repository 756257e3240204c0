"""Configurable-scale person search: detection post-processing with an
identity memory, appearance/structure scene synthesis, distillation-based
re-identification, and a full retrieval evaluation protocol."""

from .core import (
    UNLABELED,
    BoundingBox,
    DegenerateInputError,
    Detection,
    EmptyCropError,
    GeometryError,
    PersonCrop,
    crop_and_resize,
    iou,
    is_labeled,
    l2_normalize,
)
from .data import (
    AnnotatedFrame,
    Query,
    SceneImage,
    SearchProtocol,
    ToyOracle,
    ToySpec,
    generate_toy_dataset,
    load_annotations,
    sample_training_pairs,
    save_annotations,
)
from .detect import (
    AidqNet,
    ConfigError,
    DetectorConfig,
    FileDetector,
    GroundTruthDetector,
    IdentityMemory,
    PostProcessedDetector,
    TemplateToyDetector,
    aidq_loss,
    filter_by_confidence,
    hard_negative_count,
    harvest_detection_crops,
    harvest_gt_crops,
    match_to_ground_truth,
    nms,
    run_aidq_training,
    train_embedder,
    update_memory,
)
from .evaluation import (
    EvalSummary,
    RankedResult,
    SweepReport,
    UnevaluableQueryError,
    average_precision,
    cmc_top_k,
    evaluate_protocol,
    mean_ap,
    resample_galleries,
    search,
    sweep,
)
from .reid import (
    JointTrainer,
    LossWeights,
    StudentHead,
    StructureHead,
    TeacherNet,
    cross_entropy,
    embed,
    embed_crops,
    kl_distill,
    oim_loss,
    run_joint_training,
    softmax,
    structure_id_loss,
    synth_id_loss,
    train_teacher,
)
from .synthgan import (
    AppearanceEncoder,
    Decoder,
    GanProfile,
    PatchDiscriminator,
    SceneSynthesisModel,
    StructureEncoder,
    adversarial_losses,
    discriminator_objective,
    generator_adversarial_loss,
    l1_code_loss,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
