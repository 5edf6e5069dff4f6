"""Barrier-smoothing solver for bilevel programs with lower-level constraints."""
from .corpus import NAMES, corpus_get, corpus_names
from .errors import BilevelError
from .metrics import grid_oracle, infeasibility, ratios, value_function
from .problem import BilevelProblem, Reference, from_values, load_problem_file
from .smoothing import eval_zk, sensitivity
from .solver import SolverConfig, SolveReport, Status, solve

__all__ = [
    "BilevelError", "BilevelProblem", "NAMES", "Reference", "SolveReport", "SolverConfig", "Status",
    "corpus_get", "corpus_names", "eval_zk", "from_values", "grid_oracle", "infeasibility",
    "load_problem_file", "ratios", "sensitivity", "solve", "value_function",
]
