"""Stage orchestration: selection-stage training, source-weight extraction,
adversarial-stage training, prediction, metrics, leave-one-subject-out
cross-validation, and the ablation harness.

Per-fold seeds derive from the run seed plus the target domain id, and every
RNG stream is keyed by domain id rather than list position, so results are
invariant to how domains are ordered in a bundle and identical across serial
and parallel fold execution.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import data as data_mod
from . import losses, model, nn, seeds

FORMAT_VERSION = 1

WEIGHT_MIN = 0.5
WEIGHT_MAX = 2.0

TOGGLES = ("mdc", "mmd", "adversarial", "ss", "noise")
TOGGLE_ROW_NAMES = {
    "mdc": "w/o MDC loss",
    "mmd": "w/o MMD loss",
    "adversarial": "w/o Adversarial",
    "ss": "w/o SS",
    "noise": "w/o Noise",
}


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.005
    epochs_ss: int = 20
    epochs_as: int = 30
    grl_lambda: float = 1.0
    alpha: float = 0.5
    feature_dim: int = 32
    hidden_dim: int = 64
    radius: float = 1.0
    noise_variance: float = 0.01
    seed: int = 0
    equal_weights: bool = False
    conditional_mmd: bool = False
    mdc_detach_features: bool = False
    warm_start_encoder: bool = False
    disable: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.batch_size < 2:
            raise PipelineError(f"batch_size must be at least 2, got {self.batch_size}")
        for name in ("learning_rate", "epochs_ss", "epochs_as", "feature_dim",
                     "hidden_dim", "radius"):
            if getattr(self, name) <= 0:
                raise PipelineError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "grl_lambda", "alpha",
                     "noise_variance"):
            if getattr(self, name) < 0:
                raise PipelineError(f"{name} must be nonnegative")
        unknown = set(self.disable) - set(TOGGLES)
        if unknown:
            raise PipelineError(f"unknown disable toggles: {sorted(unknown)}")
        object.__setattr__(self, "disable", frozenset(self.disable))


def config_to_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["disable"] = sorted(cfg.disable)
    return out


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "disable" in d:
        d["disable"] = frozenset(d["disable"])
    return TrainConfig(**d)


@dataclass
class SourceWeightVector:
    """Per-source transferability weights; ``counts`` is None for the
    equal-weight fallback where no classification happened."""

    domain_ids: tuple
    weights: np.ndarray
    counts: np.ndarray | None = None
    min_w: float = WEIGHT_MIN
    max_w: float = WEIGHT_MAX


@dataclass
class MetricsResult:
    accuracy: float
    macro_f1: float
    macro_auc: float | None
    confusion: np.ndarray
    f1_zero_classes: list[int]
    auc_missing_classes: list[int]


@dataclass
class RunReport:
    target_domain_id: int
    seed: int
    label: str
    accuracy: float
    macro_f1: float
    macro_auc: float | None
    confusion: np.ndarray
    f1_zero_classes: list[int]
    auc_missing_classes: list[int]
    source_weights: SourceWeightVector | None
    ss_curve: list[dict]
    as_curve: list[dict]
    config: dict
    wall_time: float  # informational only; excluded from serialized reports


def _loss_weights(cfg: TrainConfig) -> losses.LossWeights:
    return losses.LossWeights(
        alpha=cfg.alpha,
        disable=cfg.disable,
        conditional_mmd=cfg.conditional_mmd,
        mdc_detach_features=cfg.mdc_detach_features,
    )


def _network_config(bundle, num_sources: int, cfg: TrainConfig) -> model.NetworkConfig:
    return model.NetworkConfig(
        input_dim=bundle.feature_dim,
        hidden_dim=cfg.hidden_dim,
        feature_dim=cfg.feature_dim,
        num_classes=bundle.num_classes,
        num_domains=num_sources,
        radius=cfg.radius,
        noise_variance=0.0 if "noise" in cfg.disable else cfg.noise_variance,
        grl_lambda=0.0 if "adversarial" in cfg.disable else cfg.grl_lambda,
    )


def _split_domains(bundle):
    if bundle.target_id is None:
        raise PipelineError("bundle has no designated target domain")
    target = bundle.domain_by_id(bundle.target_id)
    sources = sorted(
        (d for d in bundle.domains if d.domain_id != bundle.target_id),
        key=lambda d: d.domain_id,
    )
    if len(sources) < 2:
        raise PipelineError(f"need at least 2 source domains, got {len(sources)}")
    return sources, target


def _assemble_batch(sources, target, src_batches, tgt_batches, step,
                    source_weights=None) -> losses.DomainBatch:
    feats, labels = [], []
    for d, batches in zip(sources, src_batches):
        idx = batches[step % len(batches)]
        feats.append(d.features[idx])
        labels.append(d.emotion_labels[idx])
    tgt_idx = tgt_batches[step % len(tgt_batches)]
    return losses.DomainBatch(
        source_ids=[d.domain_id for d in sources],
        source_features=feats,
        source_labels=labels,
        target_features=target.features[tgt_idx],
        source_weights=source_weights,
    )


def _run_stage(net, sources, target, cfg: TrainConfig, *, stage: str, epochs: int,
               epoch_tag: int, source_weights=None):
    """Shared epoch/step loop: forward, backprop, update, renormalize."""
    loss_cfg = _loss_weights(cfg)
    opt = nn.SgdOptimizer(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    params = net.parameters()
    steps_per_epoch = math.ceil(min(d.num_samples for d in sources) / cfg.batch_size)
    curve = []
    gstep = 0
    for epoch in range(epochs):
        epoch_seed = seeds.derive_seed(epoch_tag, cfg.seed, epoch)
        src_batches = [data_mod.batch_iterator(d, cfg.batch_size, epoch_seed)
                       for d in sources]
        tgt_batches = data_mod.batch_iterator(target, cfg.batch_size, epoch_seed)
        for step in range(steps_per_epoch):
            batch = _assemble_batch(sources, target, src_batches, tgt_batches, step,
                                    source_weights)
            try:
                if stage == "ss":
                    result = model.ss_forward(net, batch, "train", loss_cfg)
                else:
                    result = model.as_forward(net, batch, "train", loss_cfg)
                ag.backprop(result.loss)
                grads = {p: result.loss.tape.param_grad(p) for p in params}
                nn.sgd_step(opt, params, grads)
            except (ag.AutogradError, nn.NnError, losses.LossError) as exc:
                raise PipelineError(
                    f"{stage} stage aborted at epoch {epoch} step {step} "
                    f"(global step {gstep}): {exc}"
                ) from exc
            for head in net.heads():
                nn.renormalize_slr_weights(head)
            entry = {
                "step": gstep,
                "epoch": epoch,
                "total": result.loss.item(),
                "dcls": result.dcls_value,
                "ecls": result.ecls_value,
                "mmd": result.mmd_value,
            }
            if stage == "as":
                entry["mdc"] = result.mdc_value
            curve.append(entry)
            gstep += 1
    net.set_mode("eval")
    return curve


def train_ss(bundle, cfg: TrainConfig):
    """Train the selection stage; returns the network in eval mode plus the
    per-step loss curve."""
    sources, target = _split_domains(bundle)
    net = model.init_networks(
        _network_config(bundle, len(sources), cfg),
        seeds.derive_rng(seeds.SS_INIT, cfg.seed), "ss",
    )
    curve = _run_stage(net, sources, target, cfg, stage="ss", epochs=cfg.epochs_ss,
                       epoch_tag=seeds.SS_EPOCH)
    return net, curve


def _encode_eval(net, features: np.ndarray) -> np.ndarray:
    net.set_mode("eval")
    tape = ag.Tape()
    return net.encode(tape.leaf(features)).data


def compute_source_weights(ss_net, target_features: np.ndarray,
                           source_ids) -> SourceWeightVector:
    """Classify every target sample with the selection-stage discriminator and
    min-max normalize the per-source assignment counts into [0.5, 2]."""
    target_features = np.asarray(target_features, dtype=np.float64)
    if target_features.shape[0] == 0:
        raise PipelineError("cannot compute source weights from an empty target")
    probs = ss_net.domain_head.predict(_encode_eval(ss_net, target_features))
    assigned = np.argmax(probs, axis=1)  # ties resolve to the lowest index
    counts = np.bincount(assigned, minlength=len(source_ids))
    cmin, cmax = counts.min(), counts.max()
    if cmax == cmin:
        weights = np.ones(len(source_ids))
    else:
        weights = WEIGHT_MIN + (WEIGHT_MAX - WEIGHT_MIN) * (counts - cmin) / (cmax - cmin)
    return SourceWeightVector(tuple(source_ids), weights, counts)


def train_as(bundle, weights: SourceWeightVector | None, frozen_head,
             cfg: TrainConfig, encoder_init: dict | None = None):
    """Train the adversarial stage on the re-weighted sources.

    ``weights=None`` or ``frozen_head=None`` select the no-selection fallback:
    all-one weights and a frozen copy of the domain head's own initialization.
    """
    sources, target = _split_domains(bundle)
    net = model.init_networks(
        _network_config(bundle, len(sources), cfg),
        seeds.derive_rng(seeds.AS_INIT, cfg.seed), "as",
    )
    if encoder_init is not None:
        net.encoder.load_state_arrays(encoder_init)
    if frozen_head is not None:
        net.attach_frozen_head(frozen_head)
    source_ids = tuple(d.domain_id for d in sources)
    if weights is None:
        weights = SourceWeightVector(source_ids, np.ones(len(sources)))
    if tuple(weights.domain_ids) != source_ids:
        raise PipelineError(
            f"weight vector domains {weights.domain_ids} do not match sources {source_ids}"
        )
    curve = _run_stage(net, sources, target, cfg, stage="as", epochs=cfg.epochs_as,
                       epoch_tag=seeds.AS_EPOCH, source_weights=weights.weights)
    return net, curve


def predict_target(as_net, target_features: np.ndarray):
    """Eval-mode prediction; argmax ties resolve to the lowest class index."""
    probs = as_net.emotion_head.predict(_encode_eval(as_net, target_features))
    return np.argmax(probs, axis=1), probs


def _binary_rank_auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """One-vs-rest ROC-AUC by the rank-statistic formulation with average
    ranks on ties."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # average of 1-based ranks i+1..j
        i = j
    rank_sum = ranks[positive].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(predictions, probabilities, truth, num_classes: int) -> MetricsResult:
    predictions = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if predictions.shape != truth.shape or probabilities.shape[0] != truth.size:
        raise PipelineError("metrics: predictions, probabilities and truth misaligned")
    if num_classes < 2:
        raise PipelineError("metrics: need at least 2 classes")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (truth, predictions), 1)
    accuracy = float(np.trace(confusion) / truth.size)

    f1s, f1_zero = [], []
    for k in range(num_classes):
        tp = confusion[k, k]
        fp = confusion[:, k].sum() - tp
        fn = confusion[k, :].sum() - tp
        if tp + fp + fn == 0:
            f1s.append(0.0)  # class absent in both truth and prediction
            f1_zero.append(k)
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall)
                   if precision + recall else 0.0)
    macro_f1 = float(np.mean(f1s))

    aucs, auc_missing = [], []
    for k in range(num_classes):
        auc = _binary_rank_auc(probabilities[:, k], truth == k)
        if auc is None:
            auc_missing.append(k)
        else:
            aucs.append(auc)
    macro_auc = float(np.mean(aucs)) if aucs else None
    return MetricsResult(accuracy, macro_f1, macro_auc, confusion, f1_zero, auc_missing)


def _run_label(cfg: TrainConfig) -> str:
    plain = {"mdc", "mmd", "adversarial"} <= set(cfg.disable)
    no_selection = cfg.equal_weights or "ss" in cfg.disable
    return "nontransfer" if plain and no_selection else "ssas"


def run_pipeline(bundle, cfg: TrainConfig) -> RunReport:
    """Full run on one fold: selection stage, weight extraction, adversarial
    stage, prediction, metrics. The target's labels are read only for metrics."""
    t0 = time.perf_counter()
    sources, target = _split_domains(bundle)
    skip_selection = cfg.equal_weights or "ss" in cfg.disable

    ss_curve: list[dict] = []
    weights = None
    frozen_head = None
    encoder_init = None
    if not skip_selection:
        ss_net, ss_curve = train_ss(bundle, cfg)
        weights = compute_source_weights(
            ss_net, target.features, [d.domain_id for d in sources]
        )
        frozen_head = model.FrozenSlrHead.from_head(ss_net.domain_head)
        if cfg.warm_start_encoder:
            encoder_init = ss_net.encoder.state_arrays()

    as_net, as_curve = train_as(bundle, weights, frozen_head, cfg,
                                encoder_init=encoder_init)
    predictions, probabilities = predict_target(as_net, target.features)
    metrics = compute_metrics(predictions, probabilities, target.emotion_labels,
                              bundle.num_classes)
    return RunReport(
        target_domain_id=bundle.target_id,
        seed=cfg.seed,
        label=_run_label(cfg),
        accuracy=metrics.accuracy,
        macro_f1=metrics.macro_f1,
        macro_auc=metrics.macro_auc,
        confusion=metrics.confusion,
        f1_zero_classes=metrics.f1_zero_classes,
        auc_missing_classes=metrics.auc_missing_classes,
        source_weights=weights,
        ss_curve=ss_curve,
        as_curve=as_curve,
        config=config_to_dict(cfg),
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Leave-one-subject-out cross-validation and the ablation harness.
# ---------------------------------------------------------------------------

@dataclass
class LosocvResult:
    reports: list[RunReport]
    failures: list[tuple[int, str]]
    aggregate: dict


def _fold_worker(args):
    bundle, cfg = args
    try:
        return "ok", run_pipeline(bundle, cfg)
    except Exception as exc:  # noqa: BLE001 - fold isolation by design
        return "err", (bundle.target_id, f"{type(exc).__name__}: {exc}")


def _aggregate_metrics(reports) -> dict:
    def stats(values):
        if not values:
            return {"mean": None, "std": None}
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std())}  # population std

    return {
        "accuracy": stats([r.accuracy for r in reports]),
        "macro_f1": stats([r.macro_f1 for r in reports]),
        "macro_auc": stats([r.macro_auc for r in reports if r.macro_auc is not None]),
        "num_folds": len(reports),
    }


def run_losocv(bundle, cfg: TrainConfig, parallel: int = 1) -> LosocvResult:
    """Each domain serves once as the target; fold seed = seed + target id.

    Folds are fully isolated (own networks, optimizer, RNG streams); one
    fold's failure is reported without aborting the others.
    """
    ids = sorted(d.domain_id for d in bundle.domains)
    if len(ids) < 3:
        raise PipelineError(f"leave-one-out needs at least 3 domains, got {len(ids)}")
    fold_args = [
        (bundle.with_target(i), replace(cfg, seed=cfg.seed + i)) for i in ids
    ]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(_fold_worker, fold_args))
    else:
        outcomes = [_fold_worker(a) for a in fold_args]

    reports, failures = [], []
    for status, payload in outcomes:
        if status == "ok":
            reports.append(payload)
        else:
            failures.append(payload)
    return LosocvResult(reports, failures, _aggregate_metrics(reports))


@dataclass
class AblationRow:
    name: str
    toggle: str | None
    accuracy_mean: float
    accuracy_std: float
    delta: float


def apply_toggle(cfg: TrainConfig, toggle: str) -> TrainConfig:
    if toggle not in TOGGLES:
        raise PipelineError(f"unknown ablation toggle '{toggle}'")
    return replace(cfg, disable=cfg.disable | {toggle})


def run_ablation(bundle, cfg: TrainConfig, toggles, parallel: int = 1):
    """Leave-one-out accuracy of the full method and of each single-component
    removal, same seeds throughout; rows named after what was removed."""
    toggles = list(toggles)
    for t in toggles:
        if t not in TOGGLES:
            raise PipelineError(f"unknown ablation toggle '{t}'")
    full = run_losocv(bundle, cfg, parallel=parallel)
    full_acc = full.aggregate["accuracy"]
    rows = [AblationRow("full", None, full_acc["mean"], full_acc["std"], 0.0)]
    for t in toggles:
        res = run_losocv(bundle, apply_toggle(cfg, t), parallel=parallel)
        acc = res.aggregate["accuracy"]
        rows.append(AblationRow(
            TOGGLE_ROW_NAMES[t], t, acc["mean"], acc["std"],
            acc["mean"] - full_acc["mean"],
        ))
    return rows


# ---------------------------------------------------------------------------
# Serialization. Wall time is deliberately excluded so identical inputs give
# byte-identical reports.
# ---------------------------------------------------------------------------

def weights_to_dict(w: SourceWeightVector | None) -> dict | None:
    if w is None:
        return None
    return {
        "domain_ids": list(w.domain_ids),
        "weights": [float(x) for x in w.weights],
        "counts": None if w.counts is None else [int(c) for c in w.counts],
        "min": w.min_w,
        "max": w.max_w,
    }


def report_to_dict(report: RunReport) -> dict:
    from . import __version__

    return {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "target_domain_id": report.target_domain_id,
        "seed": report.seed,
        "label": report.label,
        "metrics": {
            "accuracy": report.accuracy,
            "macro_f1": report.macro_f1,
            "macro_auc": report.macro_auc,
        },
        "confusion": [int(v) for v in report.confusion.reshape(-1)],
        "num_classes": int(report.confusion.shape[0]),
        "f1_zero_classes": report.f1_zero_classes,
        "auc_missing_classes": report.auc_missing_classes,
        "source_weights": weights_to_dict(report.source_weights),
        "loss_curves": {"ss": report.ss_curve, "as": report.as_curve},
        "config": report.config,
    }


def curve_to_csv(curve: list[dict]) -> str:
    if not curve:
        return "step,epoch,total\n"
    keys = ["step", "epoch"] + [k for k in ("total", "dcls", "ecls", "mmd", "mdc")
                                if k in curve[0]]
    lines = [",".join(keys)]
    for entry in curve:
        lines.append(",".join(
            str(entry[k]) if k in ("step", "epoch") else repr(float(entry[k]))
            for k in keys
        ))
    return "\n".join(lines) + "\n"


def losocv_to_dict(result: LosocvResult, cfg: TrainConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "folds": [
            {
                "target_domain_id": r.target_domain_id,
                "seed": r.seed,
                "label": r.label,
                "accuracy": r.accuracy,
                "macro_f1": r.macro_f1,
                "macro_auc": r.macro_auc,
            }
            for r in result.reports
        ],
        "failures": [{"target_domain_id": i, "error": msg} for i, msg in result.failures],
        "aggregate": result.aggregate,
    }


def ablation_to_dict(rows, cfg: TrainConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "rows": [
            {
                "name": r.name,
                "toggle": r.toggle,
                "accuracy_mean": r.accuracy_mean,
                "accuracy_std": r.accuracy_std,
                "delta": r.delta,
            }
            for r in rows
        ],
    }


def ablation_to_csv(rows) -> str:
    lines = ["name,toggle,accuracy_mean,accuracy_std,delta"]
    for r in rows:
        lines.append(",".join([
            f'"{r.name}"', r.toggle or "", repr(float(r.accuracy_mean)),
            repr(float(r.accuracy_std)), repr(float(r.delta)),
        ]))
    return "\n".join(lines) + "\n"
