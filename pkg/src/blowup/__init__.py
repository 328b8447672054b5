"""
Explosion times of diffusions and Feynman-Kac functionals that involve them.

The survival function ``U(t, x) = P_x[S > t]`` of the explosion time ``S`` and
the functional ``E_x[1{S > t} f(X_t) exp(-int_0^t h(X_s) ds)]`` are computed
two independent ways: Monte Carlo over Euler-Maruyama paths
(:mod:`blowup.montecarlo`) and a finite-difference minimal solution of the
parabolic Cauchy problem (:mod:`blowup.pde`). :mod:`blowup.verify` checks the
identities that tie them together, :mod:`blowup.feller` classifies explosion
in one dimension, and :mod:`blowup.oracles` holds closed-form references.
"""

__version__ = "0.1.0"

from .expr import (ArityError, CoefficientExpr, EvaluationError, ExprError,
                   ExprSyntaxError, UnknownIdentifierError, parse_coefficient,
                   parse_expression)
from .model import (ConfigError, DiffusionModel, Domain, FeynmanKacSpec,
                    TruncationSequence, ValidationReport, diffusion_matrix, dumps_config,
                    load_config, loads_config, make_fk, make_model, validate_model)
from .paths import (BatchResult, PathResult, SimConfig, hitting_time, hitting_times,
                    simulate_batch, simulate_path, write_path_csv)
from .montecarlo import (MartingaleCheck, MCEstimate, check_martingale,
                         estimate_feynman_kac, estimate_u)
from .pde import (AlignmentError, MinimalSolution, PDEGrid, PDESolution,
                  check_supersolution, minimal_solution, solve_cauchy)
from .feller import FellerQuad, FellerReport, feller_classify
from .verify import (ContinuityBoundParams, TestFunctionJet, continuity_bound,
                     continuity_check, ito_residual, make_jet, viscosity_residual)
from .oracles import (bm_interval_survival, catalog, catalog_entry, ode_explosion_time)
