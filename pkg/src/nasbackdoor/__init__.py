"""Search cell architectures for inherent backdoor exploitability with a training-free NTK score."""

from .archspace import ArchSpec, enumerate_space, format_arch, mutate_arch, parse_arch, random_arch
from .netbuilder import InitSpec, SkeletonConfig, build_network, build_residual_baseline
from .ntkscore import ScoreConfig, ScoreReport, condition_number, empirical_ntk, score_arch
from .triggergen import GeneratorConfig, apply_trigger, build_generator, generate_trigger

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "enumerate_space", "format_arch", "mutate_arch", "parse_arch", "random_arch",
    "InitSpec", "SkeletonConfig", "build_network", "build_residual_baseline",
    "ScoreConfig", "ScoreReport", "condition_number", "empirical_ntk", "score_arch",
    "GeneratorConfig", "apply_trigger", "build_generator", "generate_trigger",
]
