"""Path-recording oracles, permutation-function constructions and their numerical verification."""

__version__ = "0.1.0"

from .cnum import CapacityError, ConvergenceError  # noqa: E402

__all__ = ["__version__", "CapacityError", "ConvergenceError", "cnum", "relations", "pstate",
           "oracle_std", "oracle_strong", "adversary", "xcli"]
