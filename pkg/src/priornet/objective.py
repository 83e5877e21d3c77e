"""Dirichlet-evidential, uncertainty-weighted training objective.

All functions accept either a single sample (logits of shape ``(C,)``) or a
batch (``(B, C)``) and broadcast over the leading axis.  Per-sample values are
returned with the leading shape of the input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (
    GradientCheckReport,
    digamma,
    finite_difference_gradient,
    log_gamma,
    relative_error,
    sigmoid,
    softplus,
    softplus_clipped,
    stable_softmax,
    trigamma,
)


@dataclass
class DirichletParams:
    evidence: np.ndarray
    alpha: np.ndarray
    alpha0: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[-1]


@dataclass
class LossHyperParams:
    lambda_kl: float = 0.01
    w_ufce: float = 1.0
    w_ce: float = 1.0
    epsilon: float = 1e-8
    evidence_cap: float = 5.0
    kl_anneal_epochs: int = 0
    # weight on the whole evidential (HENN) term; 0 turns the objective into plain CE
    w_henn: float = 1.0

    def __post_init__(self):
        for name in ("lambda_kl", "w_ufce", "w_ce", "epsilon", "kl_anneal_epochs", "w_henn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.evidence_cap <= 0:
            raise ValueError("evidence_cap must be positive")

    @classmethod
    def cross_entropy_only(cls, epsilon: float = 1e-8) -> "LossHyperParams":
        return cls(lambda_kl=0.0, w_ufce=0.0, w_ce=1.0, epsilon=epsilon, w_henn=0.0)

    def kl_weight(self, epoch: int) -> float:
        """KL weight at a 0-based epoch under linear annealing."""
        if self.kl_anneal_epochs <= 0:
            return self.lambda_kl
        return self.lambda_kl * min(1.0, epoch / self.kl_anneal_epochs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    data_term: float
    kl_term: float
    henn: float
    ufce: float
    ce: float
    total: float
    per_sample: dict = field(default_factory=dict, repr=False)

    def means(self) -> dict:
        return {k: getattr(self, k) for k in ("data_term", "kl_term", "henn", "ufce", "ce", "total")}


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integer class indices")
    if np.any(y < 0) or np.any(y >= num_classes):
        raise IndexError(f"label out of range for {num_classes} classes")
    return y


def _take(values: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.take_along_axis(values, y[..., None], axis=-1)[..., 0]


def evidence_and_alpha(logits, cap: float = 5.0) -> DirichletParams:
    z = np.asarray(logits, dtype=np.float64)
    e = softplus_clipped(z, cap)
    alpha = e + 1.0
    return DirichletParams(evidence=e, alpha=alpha, alpha0=alpha.sum(axis=-1))


def evidential_data_term(params: DirichletParams, y) -> np.ndarray:
    """psi(alpha0) - psi(alpha_y)."""
    y = _check_labels(y, params.num_classes)
    return digamma(params.alpha0) - digamma(_take(params.alpha, np.asarray(y)))


def dirichlet_kl_to_uniform(params: DirichletParams) -> np.ndarray:
    """KL[Dir(alpha) || Dir(1)] in closed form."""
    a = params.alpha
    a0 = params.alpha0
    C = a.shape[-1]
    return (log_gamma(a0) - log_gamma(a).sum(axis=-1) - log_gamma(float(C))
            + ((a - 1.0) * (digamma(a) - np.asarray(digamma(a0))[..., None])).sum(axis=-1))


def henn_loss(params: DirichletParams, y, lambda_kl: float) -> np.ndarray:
    return evidential_data_term(params, y) + lambda_kl * dirichlet_kl_to_uniform(params)


def uncertainty_weight(params: DirichletParams) -> np.ndarray:
    return 1.0 / (1.0 + params.evidence.sum(axis=-1))


def _true_class_prob(logits: np.ndarray, y: np.ndarray):
    p = stable_softmax(logits)
    p_y = _take(p, y)
    # 1 - p_y summed from the other classes so it does not cancel near p_y = 1
    rest = (p * (1.0 - _onehot(y, p.shape[-1]))).sum(axis=-1)
    return p, p_y, rest


def ufce_term(logits, y, hyper: LossHyperParams) -> np.ndarray:
    """-w * u * (1 - p_y)^u * log(p_y + eps)."""
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(y, z.shape[-1])
    u = uncertainty_weight(evidence_and_alpha(z, hyper.evidence_cap))
    _, p_y, rest = _true_class_prob(z, y)
    return -hyper.w_ufce * u * rest ** u * np.log(p_y + hyper.epsilon)


def ce_term(logits, y, epsilon: float = 1e-8) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(y, z.shape[-1])
    return -np.log(_take(stable_softmax(z), y) + epsilon)


def _as_batch(batch_logits, labels):
    z = np.asarray(batch_logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"batch logits must be B x C, got shape {z.shape}")
    if z.shape[0] < 1:
        raise ValueError("empty batch")
    y = np.asarray(labels)
    if y.shape != (z.shape[0],):
        raise ValueError(f"expected {z.shape[0]} labels, got shape {y.shape}")
    return z, _check_labels(y, z.shape[1])


def combined_loss(batch_logits, labels, hyper: LossHyperParams,
                  lambda_kl: float | None = None) -> LossBreakdown:
    """Mean over the batch of w_henn * HENN + UFCE + w_ce * CE.

    ``lambda_kl`` overrides ``hyper.lambda_kl`` (used by KL annealing).
    """
    z, y = _as_batch(batch_logits, labels)
    lam = hyper.lambda_kl if lambda_kl is None else lambda_kl
    params = evidence_and_alpha(z, hyper.evidence_cap)
    data = evidential_data_term(params, y)
    kl = dirichlet_kl_to_uniform(params)
    henn = data + lam * kl
    ufce = ufce_term(z, y, hyper)
    ce = ce_term(z, y, hyper.epsilon)
    per = hyper.w_henn * henn + ufce + hyper.w_ce * ce
    # fixed-order reductions keep batch means reproducible
    return LossBreakdown(
        data_term=float(np.mean(data)),
        kl_term=float(np.mean(kl)),
        henn=float(np.mean(henn)),
        ufce=float(np.mean(ufce)),
        ce=float(np.mean(ce)),
        total=float(np.mean(per)),
        per_sample={"data_term": data, "kl_term": kl, "henn": henn,
                    "ufce": ufce, "ce": ce, "total": per},
    )


def loss_gradient(batch_logits, labels, hyper: LossHyperParams,
                  lambda_kl: float | None = None) -> np.ndarray:
    """Analytic d(combined_loss.total)/d(logits), shape B x C.

    The uncertainty u is differentiated through (no stop-gradient).  Logits on
    the evidence-cap plateau contribute nothing through the evidence path.
    """
    z, y = _as_batch(batch_logits, labels)
    B, C = z.shape
    lam = hyper.lambda_kl if lambda_kl is None else lambda_kl
    eps = hyper.epsilon
    cap = hyper.evidence_cap
    onehot = _onehot(y, C)

    sp = softplus(z)
    de_dz = np.where(sp < cap, sigmoid(z), 0.0)
    e = np.clip(sp, 0.0, cap)
    alpha = e + 1.0
    alpha0 = alpha.sum(axis=1)
    tri_a = trigamma(alpha)
    tri_a0 = trigamma(alpha0)

    # evidential data term and KL, both as functions of alpha
    d_data = tri_a0[:, None] - onehot * tri_a
    d_kl = (alpha - 1.0) * tri_a - ((alpha0 - C) * tri_a0)[:, None]
    g_alpha = hyper.w_henn * (d_data + lam * d_kl)

    # UFCE: F = -w u g^u L with g = 1 - p_y, L = log(p_y + eps)
    p, p_y, g = _true_class_prob(z, y)
    u = 1.0 / (1.0 + e.sum(axis=1))
    L = np.log(p_y + eps)
    w = hyper.w_ufce
    with np.errstate(divide="ignore", invalid="ignore"):
        g_pow_u = g ** u
        log_g = np.where(g > 0, np.log(np.where(g > 0, g, 1.0)), 0.0)
        dF_du = -w * g_pow_u * L * (1.0 + u * log_g)
        g_pow_um1 = np.where(g > 0, g_pow_u / np.where(g > 0, g, 1.0), 0.0)
        dF_dpy = -w * u * (-u * g_pow_um1 * L + g_pow_u / (p_y + eps))
    # du/de_k = -u^2 for every k
    g_evidence = g_alpha + (dF_du * -(u * u))[:, None]

    dpy_dz = p_y[:, None] * (onehot - p)
    d_ce_dpy = -hyper.w_ce / (p_y + eps)

    grad = g_evidence * de_dz + (dF_dpy + d_ce_dpy)[:, None] * dpy_dz
    return grad / B


def gradient_check(trials: int = 100, seed: int = 0, h: float = 1e-5,
                   classes: tuple[int, int] = (2, 6), logit_range: float = 8.0) -> GradientCheckReport:
    """Compare :func:`loss_gradient` with central differences on random draws.

    Each trial draws a batch of 1-4 samples with C in ``classes``, labels and
    loss weights.  Draws with any softplus(z) within 10*h of the evidence cap
    are skipped (the clip is not differentiable there).
    """
    rng = np.random.default_rng(seed)
    max_abs = max_rel = 0.0
    checked = skipped = 0
    for _ in range(trials):
        C = int(rng.integers(classes[0], classes[1] + 1))
        B = int(rng.integers(1, 5))
        z = rng.uniform(-logit_range, logit_range, size=(B, C))
        y = rng.integers(0, C, size=B)
        hyper = LossHyperParams(
            lambda_kl=float(rng.uniform(0.0, 1.0)),
            w_ufce=float(rng.uniform(0.0, 2.0)),
            w_ce=float(rng.uniform(0.0, 2.0)),
            evidence_cap=float(rng.uniform(2.0, 6.0)),
        )
        if np.any(np.abs(softplus(z) - hyper.evidence_cap) < 10 * h):
            skipped += 1
            continue
        analytic = loss_gradient(z, y, hyper)
        numeric = finite_difference_gradient(lambda v: combined_loss(v, y, hyper).total, z, h)
        a, r = relative_error(analytic, numeric)
        max_abs = max(max_abs, a)
        max_rel = max(max_rel, r)
        checked += 1
    return GradientCheckReport(max_abs_error=max_abs, max_rel_error=max_rel,
                               num_points_checked=checked,
                               points_skipped_near_nonsmoothness=skipped)
