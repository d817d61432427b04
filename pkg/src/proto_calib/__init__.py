"""Training-free prototype calibration and few-shot class-incremental evaluation."""

from .calib import (
    CalibParams,
    calibrate_registry,
    calibrate_simteen,
    calibrate_teen,
    calibration_item,
    scaled_cosine,
    softmax_weights,
)
from .classify import logits, predict, predict_batch
from .core import (
    DataError,
    Dataset,
    EmbeddingRecord,
    LayoutError,
    ParseError,
    PrototypeRegistry,
    Provenance,
    SessionLayout,
    compute_prototype,
    empirical_prototypes,
    load_dataset,
    write_dataset,
)
from .metrics import (
    ChangeAnalysis,
    MetricBundle,
    accuracy_decomposition,
    confidence_interval,
    fnr_fpr,
    harmonic_mean,
    performance_drop,
    prediction_change,
    tbr_tnr,
)
from .protocol import EpisodeSpec, run_fscil, run_fsl, sample_episode
from .synth import GroundTruth, SynthSpec, gen_synthetic, prototype_error

__version__ = "0.1.0"
