"""Reflected, obliquely reflected and skew Ornstein-Uhlenbeck processes on
truncated spectral coordinates, with Monte Carlo checks of their Gaussian
integration-by-parts identities."""
from .spectral import (SpectralSpace, analyze, beta_mu, dirichlet_preset, exact_ou_step,
                       make_space, ou_drift, sample_mu, synthesize)
from .geometry import (ConvexBody, Ellipsoid, HalfSpace, NonnegLevel, SkewLayering,
                       SurfaceSample, ellipsoid_body, exterior_normal, halfspace_body,
                       make_layering, nonneg_level_body, rho_eval, sample_surface, skew_prob,
                       surface_density)
from .oblique import (ObliqueField, beta_mu_A, constant_field, oblique_direction,
                      reconstruct_direction, reflection_angle, sine_coupling_field,
                      tangent_frame, tangential_direction, zero_field)
from .drifts import BetaMuADrift, ConstantDrift, PerturbedLinearDrift, ZeroDrift
from .dynamics import (Model, PathBatch, PathSample, StepConfig, simulate, step_penalized,
                       step_reflect_normal, step_reflect_oblique, step_skew)
from .girsanov import GirsanovWeight, accumulate, novikov_bound, weighted_expectation
from .verify import CheckReport

__version__ = "0.1.0"
