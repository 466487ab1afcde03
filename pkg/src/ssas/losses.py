"""Loss functions and the two stage objectives.

The selection-stage objective rewards a model that keeps domains separable:
domain classification is minimized while the per-source mean-discrepancy and
emotion-classification branches pass through gradient reversal (so the encoder
maximizes them). The adversarial-stage objective is the mirror image: emotion
classification and mean discrepancies are minimized, domain classification
sits behind the reversal, and a discrepancy penalty against the frozen
selection-stage discriminator keeps the live discriminator from collapsing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor

LOG_FLOOR = 1e-12

VALID_DISABLE = frozenset({"mdc", "mmd", "adversarial", "ss", "noise"})


class LossError(Exception):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Balance coefficient for the mean-discrepancy terms plus term toggles."""

    alpha: float = 0.5
    disable: frozenset = field(default_factory=frozenset)
    conditional_mmd: bool = False
    mdc_detach_features: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        unknown = set(self.disable) - VALID_DISABLE
        if unknown:
            raise ValueError(f"unknown disable toggles: {sorted(unknown)}")


@dataclass
class DomainBatch:
    """One optimization step's worth of data.

    ``source_ids`` fixes the domain-class indexing (position i = class i);
    callers keep it sorted by domain id so the mapping is independent of how
    domains happened to be listed on disk. ``source_weights`` aligns with
    ``source_ids`` and is only consulted by the adversarial stage.
    """

    source_ids: list[int]
    source_features: list[np.ndarray]
    source_labels: list[np.ndarray]
    target_features: np.ndarray
    source_weights: np.ndarray | None = None


def cross_entropy(probs: Tensor, labels, sample_weights=None) -> Tensor:
    """Weighted mean of -log p(label), with a 1e-12 floor inside the log.

    Weights, when given, must be positive and are normalized by their sum.
    """
    if probs.data.ndim != 2:
        raise LossError(f"cross_entropy: probabilities must be 2-d, got {probs.shape}")
    batch, num_classes = probs.shape
    if batch == 0:
        raise LossError("cross_entropy: empty batch")
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise LossError(f"cross_entropy: {labels.shape} labels for batch of {batch}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LossError(
            f"cross_entropy: label outside [0, {num_classes}) in {labels.tolist()}"
        )
    tape = probs.tape
    onehot = np.zeros((batch, num_classes))
    onehot[np.arange(batch), labels] = 1.0
    picked = ag.row_sum(ag.mul(probs, tape.leaf(onehot)))
    nll = ag.scale(ag.log(ag.clamp_min(picked, LOG_FLOOR)), -1.0)
    if sample_weights is None:
        return ag.mean_all(nll)
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (batch,):
        raise LossError(f"cross_entropy: {w.shape} weights for batch of {batch}")
    if np.any(w <= 0):
        raise LossError("cross_entropy: sample weights must be positive")
    return ag.sum_all(ag.mul(nll, tape.leaf(w / w.sum())))


def mmd_loss(source_feats: Tensor, target_feats: Tensor) -> Tensor:
    """Squared distance between source and target feature means."""
    for name, t in (("source", source_feats), ("target", target_feats)):
        if t.data.ndim != 2 or t.shape[0] == 0:
            raise LossError(f"mmd: {name} batch must be a nonempty matrix, got {t.shape}")
    if source_feats.shape[1] != target_feats.shape[1]:
        raise LossError(
            f"mmd: feature widths differ: {source_feats.shape[1]} vs {target_feats.shape[1]}"
        )
    return ag.frob_norm_sq(ag.sub(ag.col_mean(source_feats), ag.col_mean(target_feats)))


def mdc_loss(p_d: Tensor, p_f) -> Tensor:
    """Mean absolute difference between the live and the frozen discriminator
    probabilities. ``p_f`` is a constant: no gradient flows through it."""
    p_f = np.asarray(p_f.data if isinstance(p_f, Tensor) else p_f, dtype=np.float64)
    if p_d.data.ndim != 2 or p_d.shape[1] == 0:
        raise LossError(f"mdc: probability matrix with zero domains, got {p_d.shape}")
    if p_f.shape != p_d.data.shape:
        raise LossError(f"mdc: shapes differ: {p_d.shape} vs {p_f.shape}")
    return ag.mean_all(ag.absolute(ag.sub(p_d, p_d.tape.leaf(p_f))))


@dataclass
class SsResult:
    loss: Tensor
    domain_probs: Tensor
    emotion_probs: Tensor
    mmd_values: list[float]
    dcls_value: float
    ecls_value: float
    mmd_value: float


@dataclass
class AsResult:
    loss: Tensor
    emotion_probs: Tensor
    target_emotion_probs: np.ndarray
    pseudo_labels: np.ndarray
    domain_probs: Tensor
    frozen_probs: np.ndarray
    dcls_value: float
    ecls_value: float
    mmd_value: float
    mdc_value: float


def _encode_batch(net, batch: DomainBatch, include_target: bool):
    """Single encoder pass over all domains; returns per-source slices and the
    target slice of the shared feature matrix.

    The target batch joins the pass only when a loss term consumes it (the
    discrepancy terms); otherwise training is purely supervised on the
    sources and the target leaves no trace in the normalization statistics.
    """
    tape = ag.Tape()
    parts = [tape.leaf(f) for f in batch.source_features]
    if include_target:
        parts.append(tape.leaf(batch.target_features))
    z = net.encode(ag.concat_rows(parts))
    counts = [f.shape[0] for f in batch.source_features]
    offsets = np.cumsum([0] + counts)
    z_sources = [
        ag.slice_rows(z, int(offsets[i]), int(offsets[i + 1])) for i in range(len(counts))
    ]
    n_src = int(offsets[-1])
    z_src_all = ag.slice_rows(z, 0, n_src)
    z_target = ag.slice_rows(z, n_src, z.shape[0]) if include_target else None
    return z_sources, z_src_all, z_target


def _validate_batch(batch: DomainBatch):
    if len(batch.source_features) < 2:
        raise LossError("objective requires at least 2 source domains")
    if len(batch.source_labels) != len(batch.source_features):
        raise LossError("objective: emotion labels missing for some source domain")
    for i, (f, y) in enumerate(zip(batch.source_features, batch.source_labels)):
        if y is None or len(y) != f.shape[0]:
            raise LossError(f"objective: labels missing or misaligned for source index {i}")


def _domain_label_vector(batch: DomainBatch) -> np.ndarray:
    counts = [f.shape[0] for f in batch.source_features]
    return np.repeat(np.arange(len(counts)), counts)


def ss_objective(net, batch: DomainBatch, cfg: LossWeights) -> SsResult:
    """Selection-stage objective on one tape.

    Domain classification (source samples only, no reversal) is minimized;
    each per-source mean discrepancy against the target and the emotion
    branch pass through gradient reversal. Target samples contribute only to
    the discrepancy terms.
    """
    _validate_batch(batch)
    use_mmd = "mmd" not in cfg.disable
    z_sources, z_src_all, z_target = _encode_batch(net, batch, include_target=use_mmd)

    domain_probs = nn.slr_forward(net.domain_head, z_src_all)
    dcls = cross_entropy(domain_probs, _domain_label_vector(batch))

    emotion_probs = nn.slr_forward(
        net.emotion_head, ag.grl(z_src_all, net.grl_ecls)
    )
    ecls = cross_entropy(emotion_probs, np.concatenate(batch.source_labels))

    total = ag.add(dcls, ecls)
    mmd_values: list[float] = []
    mmd_sum = 0.0
    if use_mmd:
        for z_i in z_sources:
            term = mmd_loss(ag.grl(z_i, net.grl_mmd), ag.grl(z_target, net.grl_mmd))
            mmd_values.append(term.item())
            total = ag.add(total, ag.scale(term, cfg.alpha))
        mmd_sum = float(sum(mmd_values))

    return SsResult(
        loss=total,
        domain_probs=domain_probs,
        emotion_probs=emotion_probs,
        mmd_values=mmd_values,
        dcls_value=dcls.item(),
        ecls_value=ecls.item(),
        mmd_value=mmd_sum,
    )


def _normalized_source_weights(batch: DomainBatch) -> np.ndarray:
    w = np.asarray(batch.source_weights, dtype=np.float64)
    if w.shape != (len(batch.source_features),):
        raise LossError(
            f"objective: {w.shape} weights for {len(batch.source_features)} sources"
        )
    if np.any(w <= 0):
        raise LossError("objective: source weights must be positive")
    return w * (w.size / w.sum())  # mean-1 normalization


def _conditional_mmd_term(z_i, labels_i, z_target, pseudo, num_classes: int) -> Tensor:
    """Mean discrepancy over classes present on both sides; falls back to the
    marginal discrepancy when no class is shared."""
    terms = []
    for k in range(num_classes):
        src_idx = np.flatnonzero(np.asarray(labels_i) == k)
        tgt_idx = np.flatnonzero(pseudo == k)
        if src_idx.size and tgt_idx.size:
            terms.append(
                mmd_loss(ag.select_rows(z_i, src_idx), ag.select_rows(z_target, tgt_idx))
            )
    if not terms:
        return mmd_loss(z_i, z_target)
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return ag.scale(total, 1.0 / len(terms))


def as_objective(net, batch: DomainBatch, cfg: LossWeights,
                 frozen_probs: np.ndarray | None = None) -> AsResult:
    """Adversarial-stage objective on one tape.

    Domain classification sits behind gradient reversal; emotion
    classification and per-source mean discrepancies are minimized with the
    source-domain terms scaled by the per-domain weights (normalized to mean
    one). The discriminator-discrepancy term compares the live head against
    the frozen one on the same features, with the frozen output treated as a
    constant. ``frozen_probs`` overrides the frozen head's output (used by
    gradient checks to hold the constant branch fixed).
    """
    _validate_batch(batch)
    if batch.source_weights is None:
        raise LossError("objective: source weights missing for the adversarial stage")
    if getattr(net, "frozen_head", None) is None:
        raise LossError("objective: frozen discriminator missing")
    w = _normalized_source_weights(batch)
    counts = [f.shape[0] for f in batch.source_features]
    per_sample_w = np.repeat(w, counts)

    use_mmd = "mmd" not in cfg.disable
    z_sources, z_src_all, z_target = _encode_batch(net, batch, include_target=use_mmd)

    z_src_reversed = ag.grl(z_src_all, net.grl_dcls)
    domain_probs = nn.slr_forward(net.domain_head, z_src_reversed)
    dcls = cross_entropy(domain_probs, _domain_label_vector(batch), per_sample_w)

    emotion_probs = nn.slr_forward(net.emotion_head, z_src_all)
    ecls = cross_entropy(
        emotion_probs, np.concatenate(batch.source_labels), per_sample_w
    )

    if use_mmd:
        target_emotion_probs = net.emotion_head.predict(z_target.data)
    else:
        target_emotion_probs = net.predict_emotion(batch.target_features)
    pseudo_labels = np.argmax(target_emotion_probs, axis=1)

    total = ag.add(dcls, ecls)

    mmd_sum = 0.0
    if use_mmd:
        num_classes = net.emotion_head.num_classes
        for weight, z_i, labels_i in zip(w, z_sources, batch.source_labels):
            if cfg.conditional_mmd:
                term = _conditional_mmd_term(z_i, labels_i, z_target, pseudo_labels,
                                             num_classes)
            else:
                term = mmd_loss(z_i, z_target)
            mmd_sum += weight * term.item()
            total = ag.add(total, ag.scale(term, cfg.alpha * weight))

    mdc_value = 0.0
    frozen_out = np.zeros_like(domain_probs.data)
    if "mdc" not in cfg.disable:
        if frozen_probs is not None:
            frozen_out = np.asarray(frozen_probs, dtype=np.float64)
        else:
            frozen_out = net.frozen_head.predict(z_src_all.data)
        if cfg.mdc_detach_features:
            p_d_for_mdc = nn.slr_forward(
                net.domain_head, z_src_all.tape.leaf(z_src_all.data)
            )
        else:
            p_d_for_mdc = domain_probs
        mdc = mdc_loss(p_d_for_mdc, frozen_out)
        mdc_value = mdc.item()
        total = ag.add(total, mdc)

    return AsResult(
        loss=total,
        emotion_probs=emotion_probs,
        target_emotion_probs=target_emotion_probs,
        pseudo_labels=pseudo_labels,
        domain_probs=domain_probs,
        frozen_probs=frozen_out,
        dcls_value=dcls.item(),
        ecls_value=ecls.item(),
        mmd_value=mmd_sum,
        mdc_value=mdc_value,
    )
