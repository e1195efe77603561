"""Synthetic audiovisual feature benchmark with controllable domain shift.

Generates seeded datasets of per-clip (visual, audio) feature pairs. Audio
prototypes are shared across domains per (class, cluster) up to a small
jitter; visual prototypes are separated across domains by a configurable
distance. Silent classes draw audio from one class-independent background
distribution, so their audio carries no class signal.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import store

GENERATOR_VERSION = "1"

# spawn-key constants for derived seed streams
_PROTO_KEY = 17
_MIX_KEY = 23
_ALT_VISUAL_KEY = 29
_DOMAIN_CODE = {"source": 1, "target": 2}


class SpecError(ValueError):
    """Raised when a DomainSpec (or an operation argument) violates an invariant."""


@dataclass(frozen=True)
class DomainSpec:
    """Full declarative description of one synthetic benchmark."""

    K: int
    audible: tuple[bool, ...]
    clusters_per_class: tuple[int, ...]
    source_class_prior: tuple[float, ...]
    target_class_prior: tuple[float, ...]
    source_cluster_freq: tuple[tuple[float, ...], ...]
    target_cluster_freq: tuple[tuple[float, ...], ...]
    C_v: int = 32
    C_a: int = 32
    n: int = 4
    sigma_within: float = 1.0
    visual_shift: float = 0.0
    audio_jitter: float = 0.0
    N: int = 200
    M: int = 200
    multilabel: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.K < 2:
            raise SpecError(f"K must be >= 2, got {self.K}")
        if self.n < 1:
            raise SpecError(f"n must be >= 1, got {self.n}")
        if self.N < 1 or self.M < 1:
            raise SpecError(f"N and M must be >= 1, got N={self.N}, M={self.M}")
        if self.visual_shift < 0:
            raise SpecError(f"visual_shift must be >= 0, got {self.visual_shift}")
        if self.audio_jitter < 0:
            raise SpecError(f"audio_jitter must be >= 0, got {self.audio_jitter}")
        for name in ("audible", "clusters_per_class", "source_class_prior", "target_class_prior",
                     "source_cluster_freq", "target_cluster_freq"):
            if len(getattr(self, name)) != self.K:
                raise SpecError(f"{name} must have length K={self.K}")
        for name in ("source_class_prior", "target_class_prior"):
            prior = getattr(self, name)
            if abs(sum(prior) - 1.0) > 1e-9:
                raise SpecError(f"{name} must sum to 1 within 1e-9, got {sum(prior)}")
            if any(p < 0 for p in prior):
                raise SpecError(f"{name} entries must be >= 0")
        for k in range(self.K):
            if self.clusters_per_class[k] < 1:
                raise SpecError(f"clusters_per_class[{k}] must be >= 1")
            for name in ("source_cluster_freq", "target_cluster_freq"):
                freq = getattr(self, name)[k]
                if len(freq) != self.clusters_per_class[k]:
                    raise SpecError(f"{name}[{k}] must have length clusters_per_class[{k}]")
                if abs(sum(freq) - 1.0) > 1e-9:
                    raise SpecError(f"{name}[{k}] must sum to 1 within 1e-9, got {sum(freq)}")
                if any(f < 0 for f in freq):
                    raise SpecError(f"{name}[{k}] entries must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["audible"] = tuple(bool(a) for a in d["audible"])
        d["clusters_per_class"] = tuple(int(c) for c in d["clusters_per_class"])
        d["source_class_prior"] = tuple(float(p) for p in d["source_class_prior"])
        d["target_class_prior"] = tuple(float(p) for p in d["target_class_prior"])
        d["source_cluster_freq"] = tuple(tuple(float(f) for f in row) for row in d["source_cluster_freq"])
        d["target_cluster_freq"] = tuple(tuple(float(f) for f in row) for row in d["target_cluster_freq"])
        return cls(**d)


@dataclass
class VideoSample:
    """One synthetic video: n clips of paired features plus generation metadata.

    ``label`` is None for unlabeled target videos; their ground truth lives
    behind :meth:`Dataset.target_labels`.
    """

    id: str
    domain: str
    visual: np.ndarray  # (n, C_v) float32
    audio: np.ndarray   # (n, C_a) float32
    label: int | np.ndarray | None
    true_cluster: int
    audible: bool


@dataclass
class Dataset:
    spec: DomainSpec
    source: list[VideoSample]
    target: list[VideoSample]
    _target_labels: list = field(repr=False)
    version: str = GENERATOR_VERSION

    def target_labels(self) -> list:
        """Ground-truth target labels. Evaluation-only accessor.

        Training code must never call this in fully-unsupervised mode; the
        contract is enforced by tests that monkeypatch it to raise.
        """
        return list(self._target_labels)

    def labeled_target_split(self, fraction: float, seed: int) -> tuple[list[int], list]:
        """Indices and labels of the target videos that come labeled.

        Models the semi-supervised setting where a fraction of target videos
        ships with annotations as part of the task definition.
        """
        if not 0.0 <= fraction <= 1.0:
            raise SpecError(f"labeled fraction must be in [0,1], got {fraction}")
        count = int(math.floor(fraction * len(self.target)))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
        idx = sorted(rng.choice(len(self.target), size=count, replace=False).tolist())
        return idx, [self._target_labels[i] for i in idx]

    # stacked-array views used by the training code
    def visual_array(self, domain: str) -> np.ndarray:
        samples = self.source if domain == "source" else self.target
        return np.stack([s.visual for s in samples])

    def audio_array(self, domain: str) -> np.ndarray:
        samples = self.source if domain == "source" else self.target
        return np.stack([s.audio for s in samples])

    def source_labels(self) -> np.ndarray:
        if self.spec.multilabel:
            return np.stack([s.label for s in self.source])
        return np.array([s.label for s in self.source], dtype=np.int64)


@dataclass
class _Prototypes:
    audio_source: list[np.ndarray]   # per class: (clusters, C_a)
    audio_target: list[np.ndarray]
    visual_source: list[np.ndarray]  # per class: (clusters, C_v)
    visual_target: list[np.ndarray]


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _shift_directions(spec: DomainSpec, base: list[np.ndarray]) -> list[np.ndarray]:
    """Unit direction per (class, cluster): toward the next class's prototype.

    Aiming the cross-domain shift at a confusable class (rather than a random
    direction) models appearance changes that actively mislead a source-trained
    visual classifier, not just blur it.
    """
    dirs = []
    for k in range(spec.K):
        nk = (k + 1) % spec.K
        rows = []
        for j in range(spec.clusters_per_class[k]):
            jn = j % spec.clusters_per_class[nk]
            d = base[nk][jn] - base[k][j]
            norm = np.linalg.norm(d)
            rows.append(d / norm if norm > 0 else np.zeros(spec.C_v))
        dirs.append(np.stack(rows))
    return dirs


def _draw_prototypes(spec: DomainSpec, seed_key: int) -> _Prototypes:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, seed_key]))
    audio_s, audio_t, base_v = [], [], []
    for k in range(spec.K):
        c = spec.clusters_per_class[k]
        a = rng.standard_normal((c, spec.C_a))
        jitter = np.stack([_unit(rng, spec.C_a) for _ in range(c)]) * spec.audio_jitter
        audio_s.append(a)
        audio_t.append(a + jitter)
        base_v.append(rng.standard_normal((c, spec.C_v)))
    dirs = _shift_directions(spec, base_v)
    vis_s = [b.copy() for b in base_v]
    vis_t = [b + spec.visual_shift * d for b, d in zip(base_v, dirs)]
    return _Prototypes(audio_s, audio_t, vis_s, vis_t)


def _sample_assignment(spec: DomainSpec, domain: str, rng: np.random.Generator):
    """Draw (active classes, their clusters) for one video."""
    prior = np.array(spec.source_class_prior if domain == "source" else spec.target_class_prior)
    freqs = spec.source_cluster_freq if domain == "source" else spec.target_cluster_freq
    if spec.multilabel:
        m = int(rng.integers(1, min(3, spec.K) + 1))
        classes = rng.choice(spec.K, size=m, replace=False, p=prior).tolist()
    else:
        classes = [int(rng.choice(spec.K, p=prior))]
    clusters = [int(rng.choice(len(freqs[k]), p=np.array(freqs[k]))) for k in classes]
    return classes, clusters


def _clip_features(spec: DomainSpec, proto: _Prototypes, domain: str,
                   classes: list[int], clusters: list[int], rng: np.random.Generator):
    vis_proto = proto.visual_source if domain == "source" else proto.visual_target
    aud_proto = proto.audio_source if domain == "source" else proto.audio_target
    visual = np.empty((spec.n, spec.C_v), dtype=np.float32)
    audio = np.empty((spec.n, spec.C_a), dtype=np.float32)
    # video-specific ambience for silent-class clips: class-independent by
    # construction and varied across videos, like real background sound
    ambience = rng.standard_normal(spec.C_a)
    for c in range(spec.n):
        k = classes[c % len(classes)]
        j = clusters[c % len(classes)]
        visual[c] = vis_proto[k][j] + spec.sigma_within * rng.standard_normal(spec.C_v)
        mean_a = aud_proto[k][j] if spec.audible[k] else ambience
        audio[c] = mean_a + spec.sigma_within * rng.standard_normal(spec.C_a)
    return visual, audio


def _make_video(spec: DomainSpec, proto: _Prototypes, domain: str, index: int) -> tuple[VideoSample, object]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _DOMAIN_CODE[domain], index]))
    classes, clusters = _sample_assignment(spec, domain, rng)
    visual, audio = _clip_features(spec, proto, domain, classes, clusters, rng)
    if spec.multilabel:
        label: int | np.ndarray = np.zeros(spec.K, dtype=np.int8)
        label[classes] = 1
    else:
        label = classes[0]
    sample = VideoSample(
        id=f"{domain[0]}{index:05d}",
        domain=domain,
        visual=visual,
        audio=audio,
        label=label,
        true_cluster=clusters[0],
        audible=bool(spec.audible[classes[0]]),
    )
    return sample, label


def generate(spec: DomainSpec) -> Dataset:
    """Generate a full dataset. Pure function of (spec, spec.seed)."""
    spec.validate()
    proto = _draw_prototypes(spec, _PROTO_KEY)
    source = []
    for i in range(spec.N):
        sample, _ = _make_video(spec, proto, "source", i)
        source.append(sample)
    target, target_labels = [], []
    for i in range(spec.M):
        sample, label = _make_video(spec, proto, "target", i)
        sample.label = None
        target.append(sample)
        target_labels.append(label)
    return Dataset(spec=spec, source=source, target=target, _target_labels=target_labels)


def mix_audio(ds: Dataset, ratio: float, seed: int) -> Dataset:
    """Contaminate a fraction of videos' audio by 0.5/0.5 mixing with another video.

    For ``floor(ratio * (N + M))`` uniformly chosen videos, each clip's audio
    becomes a convex mix with the corresponding clip of another uniformly
    sampled video (self-mixing excluded). Partners are read from the original
    unmixed audio; visual features are untouched.
    """
    if not 0.0 <= ratio <= 1.0:
        raise SpecError(f"mix ratio must be in [0,1], got {ratio}")
    out = copy.deepcopy(ds)
    if ratio == 0.0:
        return out
    all_samples = out.source + out.target
    total = len(all_samples)
    count = int(math.floor(ratio * total))
    if count == 0:
        return out
    originals = [s.audio.copy() for s in all_samples]
    rng = np.random.default_rng(np.random.SeedSequence([seed, _MIX_KEY]))
    chosen = rng.choice(total, size=count, replace=False)
    for v in chosen:
        u = int(rng.integers(total - 1))
        if u >= v:
            u += 1
        all_samples[v].audio = (0.5 * originals[v] + 0.5 * originals[u]).astype(np.float32)
    return out


def regenerate_visual(ds: Dataset, seed: int) -> Dataset:
    """Produce an independent visual stream for the same videos.

    Draws fresh visual prototypes (same shift geometry) and fresh within-clip
    noise while keeping every video's class, cluster, and audio untouched.
    Serves as the desk-scale analog of a second visual modality.
    """
    spec = ds.spec
    rng_proto = np.random.default_rng(np.random.SeedSequence([seed, _ALT_VISUAL_KEY]))
    base_v = [rng_proto.standard_normal((spec.clusters_per_class[k], spec.C_v))
              for k in range(spec.K)]
    dirs = _shift_directions(spec, base_v)
    vis_s = [b.copy() for b in base_v]
    vis_t = [b + spec.visual_shift * d for b, d in zip(base_v, dirs)]
    out = copy.deepcopy(ds)
    for domain, samples in (("source", out.source), ("target", out.target)):
        protos = vis_s if domain == "source" else vis_t
        for i, sample in enumerate(samples):
            rng = np.random.default_rng(np.random.SeedSequence([seed, _ALT_VISUAL_KEY, _DOMAIN_CODE[domain], i]))
            label = sample.label if domain == "source" else out._target_labels[i]
            if spec.multilabel:
                classes = [int(k) for k in np.flatnonzero(label)]
            else:
                classes = [int(label)]
            # cluster of non-primary classes is not recorded; reuse the primary cluster
            for c in range(spec.n):
                k = classes[c % len(classes)]
                j = sample.true_cluster if k == classes[0] else sample.true_cluster % spec.clusters_per_class[k]
                sample.visual[c] = (protos[k][j] + spec.sigma_within * rng.standard_normal(spec.C_v)).astype(np.float32)
    return out


def _label_to_str(label, multilabel: bool) -> str:
    if multilabel:
        return ";".join(str(k) for k in np.flatnonzero(label))
    return str(int(label))


def _label_from_str(s: str, K: int, multilabel: bool):
    if multilabel:
        vec = np.zeros(K, dtype=np.int8)
        if s:
            vec[[int(t) for t in s.split(";")]] = 1
        return vec
    return int(s)


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    arrays = {
        "source_visual": ds.visual_array("source"),
        "source_audio": ds.audio_array("source"),
        "target_visual": ds.visual_array("target"),
        "target_audio": ds.audio_array("target"),
    }
    meta = {"spec": ds.spec.to_dict(), "seed": ds.spec.seed, "generator_version": ds.version}
    store.save_arrays(directory, arrays, meta)
    with open(directory / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "domain", "label", "cluster", "audible"])
        for s in ds.source:
            writer.writerow([s.id, s.domain, _label_to_str(s.label, ds.spec.multilabel),
                             s.true_cluster, int(s.audible)])
        for s, label in zip(ds.target, ds._target_labels):
            writer.writerow([s.id, s.domain, _label_to_str(label, ds.spec.multilabel),
                             s.true_cluster, int(s.audible)])


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    arrays, meta = store.load_arrays(directory)
    spec = DomainSpec.from_dict(meta["spec"])
    rows = []
    with open(directory / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    source_rows = [r for r in rows if r["domain"] == "source"]
    target_rows = [r for r in rows if r["domain"] == "target"]
    source, target, target_labels = [], [], []
    for i, r in enumerate(source_rows):
        source.append(VideoSample(
            id=r["id"], domain="source",
            visual=arrays["source_visual"][i], audio=arrays["source_audio"][i],
            label=_label_from_str(r["label"], spec.K, spec.multilabel),
            true_cluster=int(r["cluster"]), audible=bool(int(r["audible"]))))
    for i, r in enumerate(target_rows):
        target.append(VideoSample(
            id=r["id"], domain="target",
            visual=arrays["target_visual"][i], audio=arrays["target_audio"][i],
            label=None, true_cluster=int(r["cluster"]), audible=bool(int(r["audible"]))))
        target_labels.append(_label_from_str(r["label"], spec.K, spec.multilabel))
    return Dataset(spec=spec, source=source, target=target, _target_labels=target_labels,
                   version=meta.get("generator_version", GENERATOR_VERSION))


def dataset_digest(ds: Dataset) -> str:
    """Stable content digest, used by determinism checks."""
    import hashlib

    h = hashlib.sha256()
    for domain in ("source", "target"):
        h.update(ds.visual_array(domain).tobytes())
        h.update(ds.audio_array(domain).tobytes())
    for s in ds.source:
        h.update(_label_to_str(s.label, ds.spec.multilabel).encode())
        h.update(bytes([s.true_cluster & 0xFF]))
    for label in ds._target_labels:
        h.update(_label_to_str(label, ds.spec.multilabel).encode())
    return h.hexdigest()
