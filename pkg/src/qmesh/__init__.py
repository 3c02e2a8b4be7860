"""Answer-quality measurement for online data-intensive service meshes.

Sampled queries run twice: once online under normal timeouts, once to
maturity with recorded inter-component replies replayed from cache. The
similarity of the two answers feeds metrics and adaptive admission
control. Everything runs on a deterministic in-process transport.
"""

from .config import RunConfig, parse_config, load_config, ConfigError
from .model import Answer, AnswerKind, ExecutionContext, Mode, Priority, Query
from .quality import true_positive_rate, register_similarity, resolve_similarity
from .experiment import ExperimentPlan, run_experiment, compare, profile_roles

__version__ = "0.1.0"

__all__ = [
    "Answer", "AnswerKind", "ConfigError", "ExecutionContext", "ExperimentPlan",
    "Mode", "Priority", "Query", "RunConfig", "compare", "load_config",
    "parse_config", "profile_roles", "register_similarity", "resolve_similarity",
    "run_experiment", "true_positive_rate", "__version__",
]
