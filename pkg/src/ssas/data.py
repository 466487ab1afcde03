"""Multi-domain dataset container, on-disk format, batching, and a synthetic
generator with controllable negative-transfer corruption.

On disk a bundle is a directory: ``manifest.json`` plus one CSV per domain
(header ``y,f0,...,f{D-1}``, label as a base-10 integer, features as
shortest round-trip decimals, UNIX newlines, UTF-8). Checksums in the
manifest guard silent corruption; byte output is deterministic for a given
bundle.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import seeds

FORMAT_VERSION = 1


class BundleError(Exception):
    pass


class MissingDomainFileError(BundleError):
    pass


class ChecksumMismatchError(BundleError):
    pass


class DimensionMismatchError(BundleError):
    pass


class LabelRangeError(BundleError):
    pass


@dataclass
class DomainDataset:
    """One subject's worth of data; the implied domain label is ``domain_id``."""

    domain_id: int
    name: str
    features: np.ndarray
    emotion_labels: np.ndarray

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]


@dataclass
class MultiDomainBundle:
    feature_dim: int
    num_classes: int
    domains: list[DomainDataset]
    target_id: int | None = None

    def domain_by_id(self, domain_id: int) -> DomainDataset:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise BundleError(f"no domain with id {domain_id}")

    def with_target(self, target_id: int) -> "MultiDomainBundle":
        self.domain_by_id(target_id)
        return replace(self, target_id=target_id)


@dataclass(frozen=True)
class SyntheticConfig:
    num_domains: int = 6
    num_classes: int = 3
    dim: int = 20
    samples_per_class: int = 150
    class_separation: float = 3.0
    domain_shift_scale: float = 0.5
    corrupt_domain_ids: frozenset = field(default_factory=frozenset)
    corrupt_shift_multiplier: float = 10.0
    label_noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 2 or self.num_classes < 2:
            raise BundleError("need at least 2 domains and 2 classes")
        if self.dim < self.num_classes:
            raise BundleError("dim must be at least the number of classes")
        if self.samples_per_class < 2:
            raise BundleError("need at least 2 samples per class")
        if not (0.0 <= self.label_noise_rate <= 1.0):
            raise BundleError(f"label_noise_rate outside [0, 1]: {self.label_noise_rate}")
        bad = {i for i in self.corrupt_domain_ids if not 0 <= i < self.num_domains}
        if bad:
            raise BundleError(f"corrupt ids outside domain range: {sorted(bad)}")
        if self.class_separation < 0 or self.domain_shift_scale < 0:
            raise BundleError("separations and shifts must be nonnegative")


def _validate_bundle(bundle: MultiDomainBundle):
    if not bundle.domains:
        raise BundleError("bundle has no domains")
    ids = sorted(d.domain_id for d in bundle.domains)
    if ids != list(range(len(ids))):
        raise BundleError(f"domain ids must be contiguous from 0, got {ids}")
    for d in bundle.domains:
        if d.features.ndim != 2 or d.features.shape[1] != bundle.feature_dim:
            raise DimensionMismatchError(
                f"domain {d.domain_id}: features {d.features.shape} do not match "
                f"feature_dim {bundle.feature_dim}"
            )
        if d.num_samples < 2:
            raise BundleError(f"domain {d.domain_id}: fewer than 2 samples")
        if not np.all(np.isfinite(d.features)):
            row = int(np.flatnonzero(~np.isfinite(d.features).all(axis=1))[0])
            raise BundleError(f"domain {d.domain_id}: non-finite feature at row {row}")
        y = d.emotion_labels
        if y.shape != (d.num_samples,):
            raise DimensionMismatchError(
                f"domain {d.domain_id}: {y.shape} labels for {d.num_samples} samples"
            )
        bad = np.flatnonzero((y < 0) | (y >= bundle.num_classes))
        if bad.size:
            raise LabelRangeError(
                f"domain {d.domain_id}: label {int(y[bad[0]])} at row {int(bad[0])} "
                f"outside [0, {bundle.num_classes})"
            )


def _random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    # QR of a Gaussian matrix with sign-corrected diagonal: uniform orthogonal.
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _scaled_rotation(dim: int, angle_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix whose rotation angles grow with ``angle_scale`` and
    that is exactly the identity at zero (Cayley transform of a scaled random
    skew-symmetric generator)."""
    g = rng.standard_normal((dim, dim))
    skew = g - g.T
    skew *= angle_scale / np.linalg.norm(skew)
    eye = np.eye(dim)
    return np.linalg.solve(eye - 0.5 * skew, eye + 0.5 * skew)


def generate_synthetic(cfg: SyntheticConfig) -> MultiDomainBundle:
    """Gaussian class clusters around shared prototypes, perturbed per domain.

    Prototypes sit at ``class_separation`` along orthonormal directions. Each
    domain applies a rigid motion to the prototype layout: a rotation about
    the prototype centroid whose angle scales with ``domain_shift_scale``,
    plus a Gaussian translation scaled by the same factor (zero shift
    reproduces the shared mixture exactly; within-domain class geometry is
    preserved for any shift). Corrupted domains get the shift multiplied by
    ``corrupt_shift_multiplier`` and a ``label_noise_rate`` fraction of
    labels resampled uniformly.
    """
    rng = seeds.derive_rng(seeds.DATA_SYNTH, cfg.seed)
    basis = _random_orthogonal(cfg.dim, rng)
    prototypes = cfg.class_separation * basis[:, :cfg.num_classes].T  # [K, D]
    centroid = prototypes.mean(axis=0)

    domains = []
    for d in range(cfg.num_domains):
        drng = seeds.derive_rng(seeds.DATA_SYNTH_DOMAIN, cfg.seed, d)
        corrupt = d in cfg.corrupt_domain_ids
        shift = cfg.domain_shift_scale * (cfg.corrupt_shift_multiplier if corrupt else 1.0)
        rotation = _scaled_rotation(cfg.dim, shift, drng)
        translation = drng.standard_normal(cfg.dim)
        means = centroid + (prototypes - centroid) @ rotation.T
        means = means + shift * translation

        feats = np.concatenate([
            means[k] + drng.standard_normal((cfg.samples_per_class, cfg.dim))
            for k in range(cfg.num_classes)
        ])
        labels = np.repeat(np.arange(cfg.num_classes), cfg.samples_per_class)
        if corrupt and cfg.label_noise_rate > 0:
            n_noisy = int(round(cfg.label_noise_rate * labels.size))
            idx = drng.choice(labels.size, size=n_noisy, replace=False)
            labels = labels.copy()
            labels[idx] = drng.integers(0, cfg.num_classes, size=n_noisy)
        domains.append(DomainDataset(d, f"domain{d}", feats, labels.astype(np.int64)))

    bundle = MultiDomainBundle(cfg.dim, cfg.num_classes, domains)
    _validate_bundle(bundle)
    return bundle


def convert_subject_tables(feature_tables, label_vectors, num_classes=None,
                           names=None) -> MultiDomainBundle:
    """Adapter for real per-subject feature tables (e.g. band-power features,
    one N x D matrix plus an N-vector of labels per subject)."""
    if len(feature_tables) != len(label_vectors):
        raise BundleError(
            f"{len(feature_tables)} feature tables but {len(label_vectors)} label vectors"
        )
    if not feature_tables:
        raise BundleError("no subject tables given")
    domains = []
    for i, (feats, labels) in enumerate(zip(feature_tables, label_vectors)):
        feats = np.asarray(feats, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        name = names[i] if names else f"subject{i}"
        domains.append(DomainDataset(i, name, feats, labels))
    if num_classes is None:
        num_classes = int(max(d.emotion_labels.max() for d in domains)) + 1
    bundle = MultiDomainBundle(domains[0].features.shape[1], num_classes, domains)
    _validate_bundle(bundle)
    return bundle


def _format_row(label: int, feats: np.ndarray) -> str:
    return ",".join([str(int(label))] + [repr(float(v)) for v in feats])


def save_bundle(bundle: MultiDomainBundle, path) -> None:
    _validate_bundle(bundle)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for d in bundle.domains:
        header = ",".join(["y"] + [f"f{j}" for j in range(bundle.feature_dim)])
        lines = [header]
        lines += [_format_row(y, row) for y, row in zip(d.emotion_labels, d.features)]
        payload = ("\n".join(lines) + "\n").encode("utf-8")
        fname = f"domain_{d.domain_id:03d}.csv"
        (path / fname).write_bytes(payload)
        entries.append({
            "id": d.domain_id,
            "name": d.name,
            "file": fname,
            "num_samples": d.num_samples,
            "sha256": hashlib.sha256(payload).hexdigest(),
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "feature_dim": bundle.feature_dim,
        "num_classes": bundle.num_classes,
        "domains": entries,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_bundle(path) -> MultiDomainBundle:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise MissingDomainFileError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    feature_dim = int(manifest["feature_dim"])
    num_classes = int(manifest["num_classes"])

    domains = []
    for entry in manifest["domains"]:
        did = int(entry["id"])
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise MissingDomainFileError(f"domain {did}: file {entry['file']} missing")
        payload = fpath.read_bytes()
        digest = hashlib.sha256(payload).hexdigest()
        if digest != entry["sha256"]:
            raise ChecksumMismatchError(
                f"domain {did}: checksum mismatch for {entry['file']}"
            )
        lines = payload.decode("utf-8").splitlines()
        if not lines:
            raise DimensionMismatchError(f"domain {did}: empty file")
        body = lines[1:]
        feats = np.empty((len(body), feature_dim))
        labels = np.empty(len(body), dtype=np.int64)
        for row, line in enumerate(body):
            parts = line.split(",")
            if len(parts) != feature_dim + 1:
                raise DimensionMismatchError(
                    f"domain {did}: row {row} has {len(parts) - 1} features, "
                    f"expected {feature_dim}"
                )
            y = int(parts[0])
            if not 0 <= y < num_classes:
                raise LabelRangeError(
                    f"domain {did}: label {y} at row {row} outside [0, {num_classes})"
                )
            labels[row] = y
            feats[row] = [float(v) for v in parts[1:]]
        if len(body) != int(entry["num_samples"]):
            raise DimensionMismatchError(
                f"domain {did}: {len(body)} rows but manifest says {entry['num_samples']}"
            )
        domains.append(DomainDataset(did, str(entry["name"]), feats, labels))

    bundle = MultiDomainBundle(feature_dim, num_classes, domains)
    _validate_bundle(bundle)
    return bundle


def batch_iterator(domain: DomainDataset, batch_size: int, epoch_seed: int):
    """Seeded permutation of the domain's indices, chunked into batches.

    A final chunk of size 1 is merged into the previous batch (normalization
    needs at least 2 rows). The order is fully determined by
    ``(domain_id, epoch_seed)``, never by the domain's position in a bundle.
    """
    if batch_size < 2:
        raise BundleError(f"batch_size must be at least 2, got {batch_size}")
    rng = seeds.derive_rng(seeds.DATA_BATCH, domain.domain_id, epoch_seed)
    perm = rng.permutation(domain.num_samples)
    batches = [perm[i:i + batch_size] for i in range(0, perm.size, batch_size)]
    if len(batches) >= 2 and batches[-1].size == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches
