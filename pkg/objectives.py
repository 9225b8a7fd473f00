"""
Loss terms of the mixed objective and the embedding-space perturbations
used by adversarial (AT) and virtual adversarial (VAT) training.

Perturbations are always built from a detached copy of the parameters (θ̂)
on a private graph, so they enter the training graph as constants.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

import config
from classifier_model import embed_batch, forward
from errors import ConfigurationError, ContractError
from numeric_core import (
    Graph, Tensor, backward, log_clamped, reduce_sum, sample_gaussian, scale, take_slice,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_ml: float = config.LAMBDA_DEFAULT
    lambda_at: float = 0.0
    lambda_em: float = 0.0
    lambda_vat: float = 0.0
    epsilon: float = 5.0
    xi: float = config.XI
    use_labeled: bool = True
    use_unlabeled: bool = False

    def validate(self):
        for name in ("lambda_ml", "lambda_at", "lambda_em", "lambda_vat"):
            if getattr(self, name) < 0:
                raise ConfigurationError(name, f"must be >= 0, got {getattr(self, name)}")
        if (self.lambda_at > 0 or self.lambda_vat > 0) and self.epsilon <= 0:
            raise ConfigurationError("epsilon", "must be > 0 when AT or VAT is enabled")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon", f"must be >= 0, got {self.epsilon}")
        if self.lambda_vat > 0 and self.xi <= 0:
            raise ConfigurationError("xi", "must be > 0 when VAT is enabled")
        if not (self.use_labeled or self.use_unlabeled) and (self.lambda_em > 0 or self.lambda_vat > 0):
            raise ConfigurationError("use_labeled", "EM/VAT need labeled or unlabeled data")
        return self

    @property
    def weights(self):
        return (self.lambda_ml, self.lambda_at, self.lambda_em, self.lambda_vat)

    @property
    def needs_unlabeled(self):
        """True when unlabeled batches contribute to some enabled term"""
        return self.use_unlabeled and (self.lambda_em > 0 or self.lambda_vat > 0)


@dataclass
class LossBreakdown:
    total: float
    ml: float = 0.0
    at: float = 0.0
    em: float = 0.0
    vat: float = 0.0
    n_labeled: int = 0
    n_unlabeled: int = 0
    clamp_events: int = 0
    graph_total: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_record(self):
        record = asdict(self)
        record.pop("graph_total")
        return record


class ClampTally:
    """Counts probabilities that hit the log floor"""

    def __init__(self):
        self.events = 0

    def observe(self, probs):
        data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
        self.events += int(np.count_nonzero(data <= 0.0))


def _observe(tally, probs):
    if tally is not None:
        tally.observe(probs)


def _batch_size(probs):
    return probs.shape[0] if probs.ndim == 2 else 1


def _picked(probs, labels):
    """probs[i, y_i] for each example (or probs[y] for a single vector)"""
    if probs.ndim == 1:
        return take_slice(probs, int(labels))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ContractError(f"{labels.shape[0] if labels.ndim else 1} labels for {probs.shape[0]} examples")
    return take_slice(probs, (np.arange(probs.shape[0]), labels))


def _check_labels(probs, labels):
    labels = np.atleast_1d(np.asarray(labels))
    num_classes = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"label outside [0, {num_classes})")


def cross_entropy_sum(probs, labels, tally=None):
    """Σ_i -log p(y_i); zero-probability targets are clamped to the log floor"""
    _check_labels(probs, labels)
    picked = _picked(probs, labels)
    if tally is not None:
        tally.observe(picked)
    return scale(reduce_sum(log_clamped(picked)), -1.0)


def loss_ml(probs, labels, tally=None):
    """Mean cross-entropy of the true labels"""
    if probs.size == 0:
        raise ContractError("loss_ml needs a non-empty batch")
    return scale(cross_entropy_sum(probs, labels, tally), 1.0 / _batch_size(probs))


def entropy_sum(probs):
    """Σ_i Σ_k -p log p with 0 log 0 = 0; zeros are defined terms, not clamp events"""
    return scale(reduce_sum(probs * log_clamped(probs)), -1.0)


def loss_em(probs):
    """Mean conditional entropy of the predictions; labels are ignored"""
    if probs.size == 0:
        raise ContractError("loss_em needs a non-empty batch")
    return scale(entropy_sum(probs), 1.0 / _batch_size(probs))


def kl_divergence(p, q, tally=None):
    """Σ p (log p - log q) summed over every row; ``p`` is a constant.

    The same clamped log is applied to both sides, so KL(p ‖ p) is exactly 0.
    """
    p = Tensor(p.data if isinstance(p, Tensor) else p)
    if p.shape != q.shape:
        raise ContractError(f"KL arguments have shapes {p.shape} and {q.shape}")
    _observe(tally, q)
    return reduce_sum(p * (log_clamped(p) - log_clamped(q)))


def _as_array(v):
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def scale_to_norm(g, epsilon, batched):
    """ε g / ‖g‖₂ with one global norm per example; zero where ‖g‖₂ = 0"""
    if not batched:
        norm = float(np.sqrt(np.sum(g * g)))
        return np.zeros_like(g) if norm == 0.0 else epsilon * g / norm
    norms = np.sqrt(np.sum(g * g, axis=tuple(range(1, g.ndim))))
    out = np.zeros_like(g)
    live = norms > 0.0
    out[live] = epsilon * g[live] / norms[live].reshape((-1,) + (1,) * (g.ndim - 1))
    return out


def adversarial_perturbation(v, labels, params, epsilon, mask=None, p_drop=0.0, rng=None):
    """r_at = ε g / ‖g‖₂ with g the gradient of the cross-entropy w.r.t. ``v``.

    ``v`` is (T, d) with a single label or (B, T, d) with B labels; each
    example gets its own norm over its whole T x d block.
    """
    v = _as_array(v)
    if epsilon == 0.0:
        return np.zeros_like(v)
    frozen = params.detached()
    inputs = Tensor(v, requires_grad=True)
    with Graph() as graph:
        out = forward(frozen, inputs, mask, p_drop, rng)
        loss = cross_entropy_sum(out.probs, labels)
    grad = backward(graph, loss).array(inputs)
    return scale_to_norm(grad, epsilon, batched=v.ndim == 3)


def loss_at(v, labels, params, epsilon, mask=None, p_drop=0.0, rng=None, perturbation=None, tally=None):
    """Cross-entropy at v + r_at; ``perturbation`` fixes r_at instead of computing it"""
    if perturbation is None:
        perturbation = adversarial_perturbation(v, labels, params, epsilon, mask, p_drop, rng)
    out = forward(params, v + Tensor(perturbation), mask, p_drop, rng)
    return loss_ml(out.probs, labels, tally)


def vat_perturbation(v, params, epsilon, xi, noise_rng, mask=None, p_drop=0.0, rng=None, clean_probs=None):
    """Virtual adversarial direction from one power iteration.

    A unit-norm Gaussian direction d (over the whole T x d block of each
    example, real tokens only) shifts v to v + ξ d; the KL gradient there,
    rescaled to norm ε, is r_vat.
    """
    v = _as_array(v)
    if epsilon == 0.0:
        return np.zeros_like(v)
    if xi <= 0.0:
        raise ContractError(f"xi must be > 0, got {xi}")
    frozen = params.detached()
    if clean_probs is None:
        clean_probs = forward(frozen, Tensor(v), mask, p_drop, rng).probs.data
    batched = v.ndim == 3
    direction = sample_gaussian(v.shape, noise_rng).data
    if mask is not None and batched:
        direction = direction * np.asarray(mask)[..., None]
    direction = scale_to_norm(direction, 1.0, batched)
    shifted = Tensor(v + xi * direction, requires_grad=True)
    with Graph() as graph:
        q = forward(frozen, shifted, mask, p_drop, rng).probs
        kl = kl_divergence(clean_probs, q)
    grad = backward(graph, kl).array(shifted)
    return scale_to_norm(grad, epsilon, batched)


def loss_vat(v, params, epsilon, xi, noise_rng=None, mask=None, p_drop=0.0, rng=None,
             perturbation=None, clean_probs=None, tally=None):
    """Mean KL(p(·|v; θ̂) ‖ p(·|v + r_vat; θ)) over the batch"""
    v_tensor = v if isinstance(v, Tensor) else Tensor(v)
    if clean_probs is None:
        clean_probs = forward(params.detached(), Tensor(v_tensor.data), mask, p_drop, rng).probs.data
    if perturbation is None:
        if noise_rng is None:
            raise ContractError("loss_vat needs a noise generator when no perturbation is given")
        perturbation = vat_perturbation(v_tensor.data, params, epsilon, xi, noise_rng, mask, p_drop, rng,
                                        clean_probs=clean_probs)
    q = forward(params, v_tensor + Tensor(perturbation), mask, p_drop, rng).probs
    return scale(kl_divergence(clean_probs, q, tally), 1.0 / _batch_size(q))


def loss_mixed(labeled, unlabeled, params, config, rngs=None, p_drop=0.0):
    """λ_ML L_ML + λ_AT L_AT + λ_EM L_EM + λ_VAT L_VAT for one step.

    ``labeled`` and ``unlabeled`` are padded ``Batch`` objects (either may
    be None when no enabled term needs it). EM and VAT average over the union
    of the participating examples. Terms with λ = 0 are never computed. Call
    inside a ``Graph`` to differentiate ``graph_total``.
    """
    config.validate()
    if (config.lambda_vat > 0 or p_drop > 0) and rngs is None:
        raise ContractError("loss_mixed needs random streams for dropout or VAT noise")
    dropout_rng = rngs["dropout"] if p_drop > 0 else None
    tally = ClampTally()
    breakdown = LossBreakdown(total=0.0)
    weighted = []

    supervised = config.lambda_ml > 0 or config.lambda_at > 0
    unsupervised = config.lambda_em > 0 or config.lambda_vat > 0
    if supervised and (labeled is None or labeled.labels is None or labeled.size == 0):
        raise ContractError("ML/AT terms need a non-empty labeled batch")

    groups = []
    clean_labeled = None
    v_labeled = None
    if labeled is not None and (supervised or (unsupervised and config.use_labeled)):
        v_labeled = embed_batch(labeled, params.embedding)
        clean_labeled = forward(params, v_labeled, labeled.mask, p_drop, dropout_rng)
        breakdown.n_labeled = labeled.size
        if unsupervised and config.use_labeled:
            groups.append((labeled, v_labeled, clean_labeled))

    if config.lambda_ml > 0:
        term = loss_ml(clean_labeled.probs, labeled.labels, tally)
        breakdown.ml = term.item()
        weighted.append(scale(term, config.lambda_ml))

    if config.lambda_at > 0:
        term = loss_at(v_labeled, labeled.labels, params, config.epsilon, labeled.mask,
                       p_drop, dropout_rng, tally=tally)
        breakdown.at = term.item()
        weighted.append(scale(term, config.lambda_at))

    if unsupervised and config.use_unlabeled and unlabeled is not None and unlabeled.size > 0:
        v_unlabeled = embed_batch(unlabeled, params.embedding)
        clean_unlabeled = forward(params, v_unlabeled, unlabeled.mask, p_drop, dropout_rng)
        groups.append((unlabeled, v_unlabeled, clean_unlabeled))
        breakdown.n_unlabeled = unlabeled.size

    if unsupervised:
        m = sum(batch.size for batch, _, _ in groups)
        if m == 0:
            raise ContractError("EM/VAT terms need a non-empty batch")
        if config.lambda_em > 0:
            term = scale(_sum_terms([entropy_sum(out.probs) for _, _, out in groups]), 1.0 / m)
            breakdown.em = term.item()
            weighted.append(scale(term, config.lambda_em))
        if config.lambda_vat > 0:
            kls = []
            for batch, v, out in groups:
                clean = out.probs.data.copy()
                r = vat_perturbation(v.data, params, config.epsilon, config.xi, rngs["vat_noise"],
                                     batch.mask, p_drop, dropout_rng, clean_probs=clean)
                q = forward(params, v + Tensor(r), batch.mask, p_drop, dropout_rng).probs
                kls.append(kl_divergence(clean, q, tally))
            term = scale(_sum_terms(kls), 1.0 / m)
            breakdown.vat = term.item()
            weighted.append(scale(term, config.lambda_vat))

    total = _sum_terms(weighted) if weighted else Tensor(0.0)
    breakdown.total = total.item()
    breakdown.graph_total = total
    breakdown.clamp_events = tally.events
    if tally.events:
        logger.warning("log clamped at the floor for %d probabilities", tally.events)
    return breakdown


def _sum_terms(terms):
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total
