"""Lipschitz-bounded learned control for a quadcopter: certification, training and evaluation."""

from .dynamics import (AlphaBounds, NominalGains, QuadParams, Quadcopter, Trajectory, UniformAlpha,
                       closed_loop_rhs, dynamics_rhs, linearize, simulate)
from .lmi import (Certificate, CertificationProblem, LmiInstance, SearchSchedule, SyntheticGate,
                  assemble_lmi, check_feasible, maximize_L_S, quad_problem, validate_certificate)
from .nn import (Mlp, lipschitz_sampled_lower, lipschitz_sdp, lipschitz_spectral_product,
                 scale_final_layer)
from .rl import ActorCritic, PpoConfig, gae, reward, train
from .sector import DomainBox, GridSpec, SectorBounds, estimate_sector_bounds, npv_residual
from .trajectory import S_CURVE, TimedWaypoint, min_snap, sample

__version__ = "0.1.0"
