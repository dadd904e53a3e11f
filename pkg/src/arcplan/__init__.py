"""arcplan: deterministic single-arc VMAT planning at desk scale.

Phantom anatomy in, leaf-sequenced deliverable plan out: a linear ray-traced
dose operator with an exact adjoint drives a projected-gradient dose-feedback
loop; a rule-based sequencer converts the optimized fluence into apertures
and monitor units; analytics cover DVH metrics, fluence similarity, and
paired non-inferiority statistics.  A CLI and a small HTTP service expose the
pipeline, including interactive steering of the target-homogeneity versus
organ-sparing trade-off.
"""

from .analytics import (
    DVHCurve,
    MetricReport,
    NonInferiorityResult,
    WilcoxonResult,
    compute_metric_report,
    conformity_index,
    dmean,
    dose_percentile,
    dvh,
    fluence_metrics,
    homogeneity_index,
    noninferiority_test,
    wilcoxon_signed_rank,
)
from .config import PipelineSettings, load_settings, settings_from_entries
from .dose import BeamModel, DoseOperator, FluenceStack, adjoint_dose, ct_normalize, forward_dose
from .errors import AugmentationRejected, ConfigError, StateError
from .geometry import (
    BevProjector,
    BevStack,
    ControlPointGeometry,
    VoxelGrid,
    build_arc_geometry,
    project_stack,
    project_to_bev,
)
from .objective import (
    ObjectiveConfig,
    bev_project_error,
    freeze_references,
    oar_error,
    oar_objective,
    ptv_error,
    ptv_objective,
    total_error,
)
from .optimizer import (
    OptimizerConfig,
    PlanningResult,
    deliverability_reg,
    feedback_correct,
    propose_initial_fluence,
)
from .phantom import (
    AugmentParams,
    PhantomSpec,
    StructureSet,
    augment,
    dilate_margin,
    generate_phantom,
)
from .pipeline import PlanSession, ReplanOutput, StageTimings
from .sequencer import (
    Aperture,
    AperturePlan,
    SequencerParams,
    apply_dlg,
    enforce_leaf_travel,
    read_plan,
    reconstruct_fluence,
    refine_subpixel,
    sequence_cp,
    sequence_plan,
    write_plan,
)
from .tensorio import read_tensor, write_tensor

__version__ = "0.1.0"
