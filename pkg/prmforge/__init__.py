from .annotator import (
    SearchBudget,
    StateTree,
    TreeNode,
    annotate_problem,
    locate_first_error,
    selection_score,
)
from .config import RunConfig, SamplingParams, load_config
from .dataset import (
    MARKER,
    MarkedSequence,
    StepAnnotation,
    emit,
    hard_label,
    interleave_markers,
    load,
    load_problems,
    stats,
)
from .errors import (
    AuthError,
    BudgetExhaustedError,
    EmitError,
    GenerationError,
    MisuseError,
    ParseError,
    PrmForgeError,
    ProtocolError,
    TransportError,
    ValidationError,
)
from .estimator import MCEstimate, RolloutRecord, estimate_mc
from .events import Event, on_shutdown
from .models import AggregationMethod, AnswerKind, ImageAttachment, Problem, Solution
from .parsing import parse_solution, render_solution
from .policy import MockBackend, MockScript, PolicyBackend, RemoteBackend
from .pool import WorkerPool
from .reranker import aggregate, evaluate_accuracy, select_best, sweep
from .runner import AnnotationRunner, BatchRunner, RunState
from .scoring import (
    StepScoreVector,
    annotation_loss,
    prm_loss,
    score_path,
    step_probability,
)
from .telemetry import Telemetry, setup_logging
from .utils import main
from .verify import verify_answer

__all__ = [
    "MARKER",
    "AggregationMethod",
    "AnnotationRunner",
    "AnswerKind",
    "AuthError",
    "BatchRunner",
    "BudgetExhaustedError",
    "EmitError",
    "Event",
    "GenerationError",
    "ImageAttachment",
    "MCEstimate",
    "MarkedSequence",
    "MisuseError",
    "MockBackend",
    "MockScript",
    "ParseError",
    "PolicyBackend",
    "PrmForgeError",
    "Problem",
    "ProtocolError",
    "RemoteBackend",
    "RolloutRecord",
    "RunConfig",
    "RunState",
    "SamplingParams",
    "SearchBudget",
    "Solution",
    "StateTree",
    "StepAnnotation",
    "StepScoreVector",
    "Telemetry",
    "TransportError",
    "TreeNode",
    "ValidationError",
    "WorkerPool",
    "aggregate",
    "annotate_problem",
    "annotation_loss",
    "emit",
    "estimate_mc",
    "evaluate_accuracy",
    "hard_label",
    "interleave_markers",
    "load",
    "load_config",
    "load_problems",
    "locate_first_error",
    "main",
    "on_shutdown",
    "parse_solution",
    "prm_loss",
    "render_solution",
    "score_path",
    "select_best",
    "selection_score",
    "setup_logging",
    "stats",
    "step_probability",
    "sweep",
    "verify_answer",
]
