"""Oracle-complexity laboratory for differentially private convex optimization."""
from ._kernels import backend
from .algorithms import (DpsgdConfig, PhasedErmConfig, PhasedSgdConfig, RunResult,
                         dpsgd_parameters, dpsgd_run, phased_erm_parameters, phased_erm_run,
                         phased_sgd_parameters, phased_sgd_run, sgd_run,
                         strongly_convex_subsolver)
from .core import (BallConstraint, BallIntersection, OrthonormalBasis, SplittableRng,
                   gaussian_vector, project_ball, project_span, sample_subspace)
from .instances import (NonsmoothInstance, QuadraticTestLoss, SmoothInstance, load_instance,
                        nonsmooth_loss, nonsmooth_minimizer, rademacher_product_sample,
                        sample_nonsmooth_instance, sample_quadratic_instance,
                        sample_smooth_instance, save_instance, smooth_suboptimality)
from .oracles import (FirstOrderReply, OracleHandle, OracleStats, ProxyReply, Query,
                      proxy_gaussian, proxy_identity, proxy_quantized, stats_snapshot,
                      true_oracle)
from .privacy import (TCDP, ZCDP, ApproxDP, amplify_with_replacement, compose,
                      dpsgd_privacy, gaussian_zcdp, group_zcdp, tcdp_subsample,
                      tcdp_to_approx)
from .reductions import (boost_erm, exponential_select, localized_erm, rescale_problem,
                         sco_to_erm)

__version__ = "0.1.0"
