"""Ensemble distribution distillation baseline: a Dirichlet-output student.

The student emits concentrations ``alpha = exp(logits / temperature)`` and is
trained inside the same online loop with the Dirichlet negative
log-likelihood of the teacher's categorical outputs.
"""

import numpy as np

from .distill import LOG_FLOOR, entropy, run_gped, student_spec_for
from .errors import ContractError
from .special import digamma, lgamma

DEFAULT_TEMPERATURE = 2.5


def _check_alpha(alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
        raise ContractError("Dirichlet concentrations must be finite and positive")
    return alpha


def dirichlet_nll_from_logs(alpha, mean_log_pi):
    """Summed -ln Dir(pi | alpha) given E[ln pi_c]; returns (value, d/d alpha).

    The density is linear in ln pi, so a running mean of log-probabilities is
    an exact stand-in for averaging the loss over teacher samples.
    """
    alpha = _check_alpha(alpha)
    L = np.asarray(mean_log_pi, dtype=np.float64)
    a0 = alpha.sum(axis=-1, keepdims=True)
    log_density = lgamma(a0)[..., 0] - lgamma(alpha).sum(axis=-1) + ((alpha - 1.0) * L).sum(axis=-1)
    grad = -(digamma(a0) - digamma(alpha) + L)
    return float(-log_density.sum()), grad


def dirichlet_nll(alpha, pi):
    """-ln Dir(pi | alpha) with pi floored at 1e-12; returns (value, d/d alpha)."""
    return dirichlet_nll_from_logs(alpha, np.log(np.maximum(np.asarray(pi, dtype=np.float64), LOG_FLOOR)))


def dirichlet_statistics(alpha):
    """(predictive mean, expected data uncertainty, total uncertainty) per row."""
    alpha = _check_alpha(alpha)
    a0 = alpha.sum(axis=-1, keepdims=True)
    mean = alpha / a0
    expected = (mean * (digamma(a0 + 1.0) - digamma(alpha + 1.0))).sum(axis=-1)
    total = entropy(mean)
    return mean, expected, total


def end2_student_spec(template, num_classes, temperature=DEFAULT_TEMPERATURE):
    return student_spec_for(template, "dirichlet", num_classes, temperature)


def run_end2(teacher_spec, student_template, D, D_prime, config, seeds, temperature=DEFAULT_TEMPERATURE, **kwargs):
    """Distill a Dirichlet student; same scheduling as :func:`~gped.distill.run_gped`.

    With the ``Uo`` estimator the table keeps running means of ln pi per class.
    """
    spec = end2_student_spec(student_template, teacher_spec.output_dim, temperature)
    return run_gped(teacher_spec, spec, D, D_prime, "dirichlet", config, seeds, **kwargs)
