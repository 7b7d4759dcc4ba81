from .cmaes import CmaConfig, CmaResult, cmaes_minimize
from .lp import LPResult, lp_solve
from .nls import nls_fit

__all__ = ["CmaConfig", "CmaResult", "cmaes_minimize", "LPResult", "lp_solve", "nls_fit"]
