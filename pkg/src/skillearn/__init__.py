"""Multi-level optimization by one-step unrolling, with learning by passing
tests and interleaving learning on a toy architecture-search space."""
from . import ad, data, engine, il, lpt, nas
from .config import RunConfig, load_config
from .data import DataSpec, DatasetBundle, GeneratorSpec, generate_data
from .engine import (CompiledProblem, MLOProblem, ParamGroup, StageSpec, ValidationSpec, ValidationTerm,
                     build_problem, solve)
from .errors import SkillearnError

__all__ = [
    "ad", "data", "engine", "il", "lpt", "nas",
    "RunConfig", "load_config", "DataSpec", "DatasetBundle", "GeneratorSpec", "generate_data",
    "CompiledProblem", "MLOProblem", "ParamGroup", "StageSpec", "ValidationSpec", "ValidationTerm",
    "build_problem", "solve", "SkillearnError",
]
