"""specgeo: spectral geometry of learned representations.

Covariance eigenspectrum metrics (effective rank, power-law decay),
eigenvector ablation, suffix-array infinity-gram language modeling with
distributional-memorization scoring, gradient-descent dynamics of a
linear bottleneck classifier, and sampling-evaluation estimators
(pass@k, preference-loss identities).
"""

__version__ = "0.1.0"

from .spectral import (  # noqa: E402
    EigenSpectrum,
    FeatureMatrix,
    SpectralMetrics,
    ablate_spectrum,
    alpha_req,
    center_features,
    covariance_spectrum,
    rankme,
    spectral_metrics,
)
from .ngram import (  # noqa: E402
    NgramPrediction,
    ProbTrace,
    SuffixIndex,
    TokenCorpus,
    build_index,
    distributional_memorization,
    infty_gram_next,
    joint_loglik,
    pattern_count,
    spearman_rho,
)
from .evalmetrics import (  # noqa: E402
    PreferenceTriple,
    dpo_loss,
    dpo_nce_identity,
    pass_at_k,
    pass_at_k_single,
)
from .dynamics import (  # noqa: E402
    DivergenceError,
    ToyConfig,
    ToyModelState,
    TrajectoryRecord,
    check_conservation,
    check_growth_law,
    gd_step,
    init_balanced,
    phase_summary,
    primacy_selection_probe,
    run_trajectory,
    softmax_alpha,
    a_matrix,
)

__all__ = [
    "__version__",
    "EigenSpectrum",
    "FeatureMatrix",
    "SpectralMetrics",
    "ablate_spectrum",
    "alpha_req",
    "center_features",
    "covariance_spectrum",
    "rankme",
    "spectral_metrics",
    "NgramPrediction",
    "ProbTrace",
    "SuffixIndex",
    "TokenCorpus",
    "build_index",
    "distributional_memorization",
    "infty_gram_next",
    "joint_loglik",
    "pattern_count",
    "spearman_rho",
    "PreferenceTriple",
    "dpo_loss",
    "dpo_nce_identity",
    "pass_at_k",
    "pass_at_k_single",
    "DivergenceError",
    "ToyConfig",
    "ToyModelState",
    "TrajectoryRecord",
    "check_conservation",
    "check_growth_law",
    "gd_step",
    "init_balanced",
    "phase_summary",
    "primacy_selection_probe",
    "run_trajectory",
    "softmax_alpha",
    "a_matrix",
]
