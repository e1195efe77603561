"""Two-stage training orchestration, baselines, and inference rules.

Stage 1 trains the visual network and audio-based attention with the
combined absent-activity + balanced objective, using pseudo-absent labels
and interaction clusters computed once from encoders pretrained on source.
Stage 2 freezes the encoders, extracts their features, and trains the
audio-infused recognizer on source labels plus target hard pseudo-labels.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch

from . import clustering, labels as pseudo, losses, store, synth
from .encoder import AudioAdaptiveEncoder, AudioAttention, AudioEncoder, VisualEncoder
from .evaluation import group_metrics, mean_ap, pair_bins, tnr_absent, top1
from .losses import LossConfig
from .recognizer import Recognizer, SoundVectorBank, build_sequence, recognizer_forward


class PipelineError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden_visual: int = 64
    hidden_audio: int = 64
    att_dim: int = 64
    att_depth: int = 8
    att_heads: int = 4
    rec_dim: int = 64
    rec_depth: int = 3
    rec_heads: int = 4

    @property
    def low_dim(self) -> int:
        # keep the visual evidence in the class-token head deliberately narrow
        return max(1, self.rec_dim // 8)


@dataclass
class OptimConfig:
    lr: float = 0.2
    lr_stage2: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32
    pretrain_epochs: int = 30
    stage1_epochs: int = 40
    stage2_epochs: int = 40


@dataclass
class ExperimentConfig:
    data: synth.DomainSpec
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    use_attention: bool = True
    use_absent: bool = True
    use_balanced: bool = True
    run_stage2: bool = True
    pseudo_source: str = "audio"        # audio | visual
    pseudo_type: str = "absent"         # absent | hard
    cluster_features: str = "audio"     # audio | visual
    cluster_k: int | None = None        # None -> elbow method
    cluster_k_max: int = 12
    sequence_mode: str = "audio_token"  # vanilla | domain_embed | audio_token
    token_source: str = "sound_vectors"
    train_audio_stage2: bool = False
    second_visual_modality: bool = False
    labeled_target_fraction: float = 0.0
    train_noise: float = 0.0
    test_noise: float = 0.0
    unfreeze_audio_head: bool = False   # fine-tune A's final layer in stage 1
    stage1_init: str = "pretrained"     # pretrained | scratch
    seed: int = 0

    def __post_init__(self):
        enums = {
            "pseudo_source": ("audio", "visual"),
            "pseudo_type": ("absent", "hard"),
            "cluster_features": ("audio", "visual"),
            "sequence_mode": ("vanilla", "domain_embed", "audio_token"),
            "token_source": ("sound_vectors", "audio_prediction", "audio_feature"),
            "stage1_init": ("pretrained", "scratch"),
        }
        for name, allowed in enums.items():
            if getattr(self, name) not in allowed:
                raise PipelineError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not 0.0 <= self.labeled_target_fraction <= 1.0:
            raise PipelineError("labeled_target_fraction must be in [0,1]")
        for name in ("train_noise", "test_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise PipelineError(f"{name} must be in [0,1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        d["data"] = synth.DomainSpec.from_dict(d["data"])
        d["loss"] = LossConfig(**d["loss"])
        model = dict(d["model"])
        model.pop("low_dim", None)
        d["model"] = ModelConfig(**model)
        d["optim"] = OptimConfig(**d["optim"])
        return cls(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def run_id(self) -> str:
        return f"{self.config_hash()[:12]}-s{self.seed}"


def default_spec(seed: int = 0) -> synth.DomainSpec:
    """Shift-heavy single-label benchmark: skewed source prior, flipped target
    prior, long-tail interaction clusters, two silent classes, large visual
    shift, nearly domain-invariant audio."""
    source_prior = (0.24, 0.20, 0.16, 0.12, 0.10, 0.08, 0.06, 0.04)
    target_prior = (0.04, 0.06, 0.08, 0.10, 0.12, 0.16, 0.20, 0.24)
    return synth.DomainSpec(
        K=8,
        audible=(True, True, True, False, True, True, False, True),
        clusters_per_class=(3,) * 8,
        source_class_prior=source_prior,
        target_class_prior=target_prior,
        source_cluster_freq=((0.80, 0.15, 0.05),) * 8,
        target_cluster_freq=((0.25, 0.35, 0.40),) * 8,
        C_v=32, C_a=32, n=4,
        sigma_within=1.0,
        visual_shift=2.0,
        audio_jitter=0.05,
        N=400, M=400,
        multilabel=False,
        seed=seed,
    )


def default_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(data=default_spec(), seed=seed)


# ---------------------------------------------------------------------------
# tensors and batching


def _t(arr) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr, dtype=np.float32))


def _labels_tensor(y, multilabel: bool):
    if multilabel:
        return torch.as_tensor(np.asarray(y, dtype=np.float32))
    return np.asarray(y, dtype=np.int64)


def _epoch_batches(count: int, batch: int, steps: int, rng: np.random.Generator):
    """Yield `steps` index arrays, cycling a fresh permutation with wraparound."""
    perm = rng.permutation(count)
    for i in range(steps):
        idx = [(i * batch + t) % count for t in range(min(batch, count))]
        yield perm[idx]


def _sgd(params, cfg: OptimConfig):
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)


# ---------------------------------------------------------------------------
# pretraining


def pretrain_audio(config: ExperimentConfig, ds: synth.Dataset) -> AudioEncoder:
    """Train the audio network on labeled source videos with the base loss."""
    if len(ds.source) == 0:
        raise PipelineError("cannot pretrain on an empty source set")
    spec = ds.spec
    torch.manual_seed(config.seed * 1009 + 11)
    model = AudioEncoder(spec.C_a, config.model.hidden_audio, spec.K, spec.multilabel)
    clips = _t(ds.audio_array("source"))
    y = _labels_tensor(ds.source_labels(), spec.multilabel)
    _fit_classifier(model, lambda b: model(clips[b])[2], y, config, stream=21)
    return model


def pretrain_visual(config: ExperimentConfig, ds: synth.Dataset) -> VisualEncoder:
    """Plain source-only visual classifier; also the visual-only baseline model."""
    if len(ds.source) == 0:
        raise PipelineError("cannot pretrain on an empty source set")
    spec = ds.spec
    torch.manual_seed(config.seed * 1009 + 12)
    model = VisualEncoder(spec.C_v, config.model.hidden_visual, spec.K, spec.multilabel)
    clips = _t(ds.visual_array("source"))
    y = _labels_tensor(ds.source_labels(), spec.multilabel)
    _fit_classifier(model, lambda b: model(clips[b])[2], y, config, stream=22)
    return model


def _fit_classifier(model, forward_batch, y, config: ExperimentConfig, stream: int):
    cfg = config.optim
    count = len(y)
    opt = _sgd(model.parameters(), cfg)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, stream]))
    steps = math.ceil(count / cfg.batch_size)
    mode = config.loss.base
    for _ in range(cfg.pretrain_epochs):
        for idx in _epoch_batches(count, cfg.batch_size, steps, rng):
            opt.zero_grad()
            probs = forward_batch(idx)
            loss = losses.base_loss(probs, y[idx], mode)
            loss.backward()
            opt.step()
    model.eval()
    return model


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Result:
    encoder: AudioAdaptiveEncoder
    clusters: clustering.ClusterModel | None
    absent: pseudo.AbsentLabels | None
    hard_targets: np.ndarray | None
    loss_trace: list[float]


def _target_probs_for_pseudo(config, ds, audio_enc, visual_enc) -> np.ndarray:
    with torch.no_grad():
        if config.pseudo_source == "audio":
            return audio_enc(_t(ds.audio_array("target")))[2].numpy()
        return visual_enc(_t(ds.visual_array("target")))[2].numpy()


def make_absent_labels(config: ExperimentConfig, ds: synth.Dataset,
                       audio_enc: AudioEncoder, visual_enc: VisualEncoder) -> pseudo.AbsentLabels:
    """Pseudo-absent labels for every target video, fixed before stage 1."""
    probs = _target_probs_for_pseudo(config, ds, audio_enc, visual_enc)
    if ds.spec.multilabel:
        alpha = pseudo.class_prior(ds.source_labels(), ds.spec.K)
        mask = pseudo.absent_mask_multi(probs, alpha, config.loss.gamma)
        return pseudo.AbsentLabels(mode="multi", provenance=config.pseudo_source, mask=mask)
    q_sets = [pseudo.absent_set_single(p, config.loss.r) for p in probs]
    return pseudo.AbsentLabels(mode="single", provenance=config.pseudo_source, q_sets=q_sets)


def make_cluster_model(config: ExperimentConfig, ds: synth.Dataset,
                       audio_enc: AudioEncoder, visual_enc: VisualEncoder) -> clustering.ClusterModel:
    """Interaction clusters over pooled source features from the pretrained encoder."""
    with torch.no_grad():
        if config.cluster_features == "audio":
            feats = audio_enc(_t(ds.audio_array("source")))[1].numpy()
        else:
            feats = visual_enc(_t(ds.visual_array("source")))[1].numpy()
    ys = ds.source_labels()
    if ds.spec.multilabel:
        # cluster by the primary (first active) class at desk scale
        ys = np.array([int(np.flatnonzero(v)[0]) for v in ys], dtype=np.int64)
    return clustering.fit_interaction_clusters(
        feats, ys, feature_source=config.cluster_features, seed=config.seed,
        k_max=config.cluster_k_max, fixed_k=config.cluster_k)


def train_stage1(config: ExperimentConfig, ds: synth.Dataset, audio_enc: AudioEncoder,
                 visual_enc: VisualEncoder | None = None) -> Stage1Result:
    """Train V and the attention module; A stays frozen (optional final-layer flag)."""
    spec = ds.spec
    needs_visual = config.pseudo_source == "visual" or config.cluster_features == "visual"
    if needs_visual and visual_enc is None:
        raise PipelineError("visual-based pseudo labels or clustering need a pretrained visual encoder")
    if len(ds.target) == 0:
        # no unlabeled videos: the target term of the objective is an empty sum
        config = replace(config, use_absent=False)

    absent = hard_targets = None
    if config.use_absent:
        if config.pseudo_type == "absent":
            absent = make_absent_labels(config, ds, audio_enc, visual_enc)
        else:
            probs = _target_probs_for_pseudo(config, ds, audio_enc, visual_enc)
            mode = "multi" if spec.multilabel else "single"
            hp = pseudo.hard_pseudo(probs, mode)
            hard_targets = np.asarray(hp)

    cluster_model = None
    n_y = n_yj = None
    weight_scale = 1.0
    src_y = ds.source_labels()
    if config.use_balanced:
        cluster_model = make_cluster_model(config, ds, audio_enc, visual_enc)
        ys = cluster_model.labels
        counts = [cluster_model.counts_for(y, j) for y, j in zip(ys, cluster_model.assignments)]
        n_y = np.array([c[0] for c in counts], dtype=np.int64)
        n_yj = np.array([c[1] for c in counts], dtype=np.int64)
        # rescale by the dataset-mean weight so the source term keeps unit
        # scale next to the absent term; relative weighting is untouched
        mean_w = float(np.mean(losses.cb_weights(n_y, config.loss.beta)
                               * losses.cb_weights(n_yj, config.loss.beta)))
        weight_scale = 1.0 / mean_w

    torch.manual_seed(config.seed * 1009 + 13)
    visual = VisualEncoder(spec.C_v, config.model.hidden_visual, spec.K, spec.multilabel)
    if config.stage1_init == "pretrained" and visual_enc is not None:
        # start from the source-pretrained weights, mirroring the pretrained
        # backbone setting; stage 1 adapts rather than learns from scratch
        visual.load_state_dict(visual_enc.state_dict())
    attention = None
    if config.use_attention:
        attention = AudioAttention(
            config.model.hidden_audio, config.model.att_dim, config.model.hidden_visual,
            depth=config.model.att_depth, heads=config.model.att_heads, max_clips=spec.n)
    encoder = AudioAdaptiveEncoder(visual, audio_enc, attention)

    for p in audio_enc.parameters():
        p.requires_grad_(False)
    trainable = list(visual.parameters())
    if attention is not None:
        trainable += list(attention.parameters())
    if config.unfreeze_audio_head:
        audio_enc.head.weight.requires_grad_(True)
        audio_enc.head.bias.requires_grad_(True)
        trainable += [audio_enc.head.weight, audio_enc.head.bias]

    cfg = config.optim
    opt = _sgd(trainable, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 23]))

    src_vis, src_aud = _t(ds.visual_array("source")), _t(ds.audio_array("source"))
    y_t = _labels_tensor(src_y, spec.multilabel)
    with torch.no_grad():
        src_afeats = audio_enc.clip_features(src_aud)
    tgt_vis = tgt_afeats = None
    if len(ds.target) > 0:
        tgt_vis = _t(ds.visual_array("target"))
        with torch.no_grad():
            tgt_afeats = audio_enc.clip_features(_t(ds.audio_array("target")))

    if absent is not None and absent.mode == "single":
        absent_mask = np.zeros((spec.M, spec.K), dtype=np.int8)
        for i, q in enumerate(absent.q_sets):
            absent_mask[i, q] = 1
    elif absent is not None:
        absent_mask = absent.mask
    else:
        absent_mask = None

    N, M, B = len(ds.source), len(ds.target), cfg.batch_size
    steps = math.ceil(max(N, M) / B)
    trace: list[float] = []
    lcfg = config.loss
    for _ in range(cfg.stage1_epochs):
        tgt_iter = _epoch_batches(M, B, steps, rng) if M else iter([None] * steps)
        src_iter = _epoch_batches(N, B, steps, rng)
        for src_idx, tgt_idx in zip(src_iter, tgt_iter):
            opt.zero_grad()
            gate_s = attention(src_afeats[src_idx]) if attention is not None else None
            _, _, p_v_src = visual(src_vis[src_idx], gate_s)
            if config.use_balanced:
                src_term = weight_scale * losses.audio_balanced_loss(
                    p_v_src, y_t[src_idx], n_y[src_idx], n_yj[src_idx], lcfg)
            else:
                src_term = losses.base_loss(p_v_src, y_t[src_idx], lcfg.base)
            loss = src_term
            if config.use_absent:
                gate_t = attention(tgt_afeats[tgt_idx]) if attention is not None else None
                _, _, p_v_tgt = visual(tgt_vis[tgt_idx], gate_t)
                if config.pseudo_type == "absent":
                    loss = loss + losses.per_sample_absent(p_v_tgt, absent_mask[tgt_idx]).mean()
                else:
                    ht = hard_targets[tgt_idx]
                    if spec.multilabel:
                        ht = torch.as_tensor(ht.astype(np.float32))
                    loss = loss + losses.base_loss(p_v_tgt, ht, lcfg.base)
            loss.backward()
            opt.step()
            trace.append(float(loss.detach()))
    encoder.eval()
    return Stage1Result(encoder=encoder, clusters=cluster_model, absent=absent,
                        hard_targets=hard_targets, loss_trace=trace)


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Result:
    recognizer: Recognizer
    bank: SoundVectorBank | None
    audio_finetuned: AudioEncoder | None
    loss_trace: list[float]
    target_training_labels: np.ndarray | None = None


@dataclass
class _Extracted:
    visual_feats: torch.Tensor
    audio_feats: torch.Tensor
    pooled_visual: torch.Tensor
    pooled_audio: torch.Tensor
    p_a: torch.Tensor
    p_v: torch.Tensor


def extract_features(encoder: AudioAdaptiveEncoder, visual, audio) -> _Extracted:
    with torch.no_grad():
        out = encoder(_t(visual), _t(audio))
    return _Extracted(out.visual_clip_features, out.audio_clip_features,
                      out.pooled_visual, out.pooled_audio, out.p_a, out.p_v)


def train_stage2(config: ExperimentConfig, ds: synth.Dataset,
                 stage1: Stage1Result) -> Stage2Result:
    """Train the recognizer (+ sound-vector bank, domain embeddings, projections)
    on source labels and target hard pseudo-labels; stage-1 encoders are frozen."""
    spec = ds.spec
    enc = stage1.encoder
    src = extract_features(enc, ds.visual_array("source"), ds.audio_array("source"))
    tgt = extract_features(enc, ds.visual_array("target"), ds.audio_array("target"))

    mode = "multi" if spec.multilabel else "single"
    tgt_y = pseudo.hard_pseudo(tgt.p_v.numpy(), mode)
    tgt_y = np.asarray(tgt_y)
    if config.labeled_target_fraction > 0:
        idx, given = ds.labeled_target_split(config.labeled_target_fraction, config.seed)
        for i, label in zip(idx, given):
            tgt_y[i] = label

    torch.manual_seed(config.seed * 1009 + 17)
    rec = Recognizer(config.model.hidden_visual, config.model.hidden_audio, spec.K,
                     dim=config.model.rec_dim, depth=config.model.rec_depth,
                     heads=config.model.rec_heads, max_clips=spec.n, multilabel=spec.multilabel)
    bank = None
    if config.sequence_mode == "audio_token" and config.token_source == "sound_vectors":
        bank = SoundVectorBank(spec.K, config.model.rec_dim, config.model.hidden_audio,
                               config.model.hidden_visual, config.model.low_dim)
    params = list(rec.parameters()) + (list(bank.parameters()) if bank is not None else [])

    audio_ft = None
    joint_audio = config.train_audio_stage2 and config.token_source == "audio_feature"
    if joint_audio:
        # fine-tune a copy so stage-1 parameters stay untouched
        audio_ft = copy.deepcopy(enc.audio)
        for p in audio_ft.parameters():
            p.requires_grad_(True)
        params += list(audio_ft.parameters())
        raw_src_audio, raw_tgt_audio = _t(ds.audio_array("source")), _t(ds.audio_array("target"))

    cfg = config.optim
    opt = torch.optim.SGD(params, lr=cfg.lr_stage2, momentum=cfg.momentum)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 29]))

    src_y = _labels_tensor(ds.source_labels(), spec.multilabel)
    tgt_y = _labels_tensor(tgt_y, spec.multilabel)
    N, M, B = len(ds.source), len(ds.target), cfg.batch_size
    steps = math.ceil(max(N, M) / B)
    trace: list[float] = []
    lcfg = config.loss
    for _ in range(cfg.stage2_epochs):
        src_iter = _epoch_batches(N, B, steps, rng)
        tgt_iter = _epoch_batches(M, B, steps, rng)
        for src_idx, tgt_idx in zip(src_iter, tgt_iter):
            opt.zero_grad()
            total = None
            for feats, idx, y_all, domain in ((src, src_idx, src_y, 0), (tgt, tgt_idx, tgt_y, 1)):
                pooled_audio, p_a = feats.pooled_audio[idx], feats.p_a[idx]
                if joint_audio:
                    raw = raw_src_audio if domain == 0 else raw_tgt_audio
                    _, pooled_audio, p_a = audio_ft(raw[idx])
                tokens, h, hp = build_sequence(
                    config.sequence_mode, feats.visual_feats[idx], feats.audio_feats[idx],
                    domain, rec, bank=bank, pooled_audio=pooled_audio,
                    pooled_visual=feats.pooled_visual[idx], p_a=p_a,
                    token_source=config.token_source)
                p_star, _ = recognizer_forward(rec, tokens)
                term = losses.recognizer_loss(p_star, h, hp, y_all[idx], lcfg)
                total = term if total is None else total + term
            total.backward()
            opt.step()
            trace.append(float(total.detach()))
    rec.eval()
    return Stage2Result(recognizer=rec, bank=bank, audio_finetuned=audio_ft, loss_trace=trace,
                        target_training_labels=np.asarray(tgt_y))


# ---------------------------------------------------------------------------
# prediction and evaluation


def stage1_predictions(encoder: AudioAdaptiveEncoder, ds: synth.Dataset, domain: str) -> np.ndarray:
    with torch.no_grad():
        out = encoder(_t(ds.visual_array(domain)), _t(ds.audio_array(domain)))
    return out.p_v.numpy()


def recognizer_predictions(config: ExperimentConfig, stage1: Stage1Result, stage2: Stage2Result,
                           ds: synth.Dataset, domain: str) -> np.ndarray:
    feats = extract_features(stage1.encoder, ds.visual_array(domain), ds.audio_array(domain))
    pooled_audio, p_a = feats.pooled_audio, feats.p_a
    if stage2.audio_finetuned is not None:
        with torch.no_grad():
            _, pooled_audio, p_a = stage2.audio_finetuned(_t(ds.audio_array(domain)))
    d = 0 if domain == "source" else 1
    with torch.no_grad():
        tokens, _, _ = build_sequence(
            config.sequence_mode, feats.visual_feats, feats.audio_feats, d,
            stage2.recognizer, bank=stage2.bank, pooled_audio=pooled_audio,
            pooled_visual=feats.pooled_visual, p_a=p_a, token_source=config.token_source)
        p_star, _ = recognizer_forward(stage2.recognizer, tokens)
    return p_star.numpy()


def infer(probabilities: list[np.ndarray]) -> np.ndarray:
    """Final prediction: single modality passes through; several average."""
    if not probabilities:
        raise PipelineError("no modality predictions supplied")
    stacked = [np.asarray(p, dtype=np.float64) for p in probabilities]
    shape = stacked[0].shape
    if any(p.shape != shape for p in stacked):
        raise PipelineError("modality predictions have mismatched shapes")
    return np.mean(stacked, axis=0)


def _metric_overall(scores, y, multilabel: bool) -> tuple[str, float]:
    if multilabel:
        return "map", mean_ap(scores, np.stack(y))
    return "top1", top1(scores, y)


def _target_metrics(prefix: str, scores: np.ndarray, ds: synth.Dataset) -> dict[str, float]:
    spec = ds.spec
    y = ds.target_labels()
    out: dict[str, float] = {}
    kind, overall = _metric_overall(scores, y, spec.multilabel)
    out[f"{prefix}_{kind}"] = overall
    groups = group_metrics(scores, np.stack(y) if spec.multilabel else y, "silent_audible",
                           audible=spec.audible, mode="map" if spec.multilabel else "top1")
    for name, value in groups.items():
        out[f"{prefix}_{kind}_{name}"] = value
    if not spec.multilabel:
        all_pairs = [(k, j) for k in range(spec.K) for j in range(spec.clusters_per_class[k])]
        source_pairs = [(s.label, s.true_cluster) for s in ds.source]
        bins = pair_bins(all_pairs, source_pairs)
        sample_pairs = [(label, s.true_cluster) for label, s in zip(y, ds.target)]
        for name, value in group_metrics(scores, y, "frequency_bins",
                                         sample_pairs=sample_pairs, bins=bins).items():
            out[f"{prefix}_{kind}_bin_{name}"] = value
    return out


# ---------------------------------------------------------------------------
# full experiment


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: dict[str, float]
    audio_encoder: AudioEncoder
    visual_pretrained: VisualEncoder
    stage1: Stage1Result
    stage2: Stage2Result | None
    timings: dict[str, float]
    dataset: synth.Dataset


def prepare_datasets(config: ExperimentConfig) -> tuple[synth.Dataset, synth.Dataset, synth.Dataset]:
    """(clean, train-view, eval-view) datasets for a run.

    The generation seed is offset by the run seed so seed sweeps vary both
    the data draw and the training randomness.
    """
    spec = replace(config.data, seed=config.data.seed + config.seed)
    ds = synth.generate(spec)
    ds_train = synth.mix_audio(ds, config.train_noise, seed=config.seed + 1000) \
        if config.train_noise > 0 else ds
    ds_eval = synth.mix_audio(ds, config.test_noise, seed=config.seed + 2000) \
        if config.test_noise > 0 else ds
    return ds, ds_train, ds_eval


def compute_metrics(config: ExperimentConfig, audio_enc: AudioEncoder,
                    visual_pre: VisualEncoder, stage1: Stage1Result,
                    stage2: Stage2Result | None, ds_train: synth.Dataset,
                    ds_eval: synth.Dataset) -> dict[str, float]:
    """Evaluation metrics for trained models; shared by training and re-evaluation."""
    metrics: dict[str, float] = {}
    p_stage1 = stage1_predictions(stage1.encoder, ds_eval, "target")
    metrics.update({k.replace("target", "target_stage1", 1): v
                    for k, v in _target_metrics("target", p_stage1, ds_eval).items()})
    if stage2 is not None:
        scores = recognizer_predictions(config, stage1, stage2, ds_eval, "target")
        metrics.update(_target_metrics("target", scores, ds_eval))
        src_scores = recognizer_predictions(config, stage1, stage2, ds_eval, "source")
        src_y = ds_eval.source_labels() if ds_eval.spec.multilabel \
            else [s.label for s in ds_eval.source]
        kind, value = _metric_overall(src_scores, src_y, ds_eval.spec.multilabel)
        metrics[f"source_{kind}"] = value
    else:
        metrics.update(_target_metrics("target", p_stage1, ds_eval))

    # pseudo-absent quality for both provenances (single-label only)
    if not ds_train.spec.multilabel:
        for provenance in ("audio", "visual"):
            cfg_p = replace(config, pseudo_source=provenance)
            absent = make_absent_labels(cfg_p, ds_train, audio_enc, visual_pre)
            metrics[f"tnr_{provenance}_target"] = tnr_absent(absent, ds_train.target_labels())
            src_probs = _source_probs_for_pseudo(cfg_p, ds_train, audio_enc, visual_pre)
            q_sets = [pseudo.absent_set_single(p, config.loss.r) for p in src_probs]
            absent_src = pseudo.AbsentLabels(mode="single", provenance=provenance, q_sets=q_sets)
            metrics[f"tnr_{provenance}_source"] = tnr_absent(
                absent_src, [s.label for s in ds_train.source])
    return metrics


def run_experiment(config: ExperimentConfig, dataset: synth.Dataset | None = None) -> RunResult:
    """Train the configured model end to end and evaluate on the target domain."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    if dataset is None:
        _, ds_train, ds_eval = prepare_datasets(config)
    else:
        ds_train = dataset
        ds_eval = synth.mix_audio(dataset, config.test_noise, seed=config.seed + 2000) \
            if config.test_noise > 0 else dataset
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    audio_enc = pretrain_audio(config, ds_train)
    visual_pre = pretrain_visual(config, ds_train)
    timings["pretrain"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    stage1 = train_stage1(config, ds_train, audio_enc, visual_pre)
    timings["stage1"] = time.perf_counter() - t0

    stage2 = None
    if config.run_stage2:
        t0 = time.perf_counter()
        stage2 = train_stage2(config, ds_train, stage1)
        timings["stage2"] = time.perf_counter() - t0

    metrics = compute_metrics(config, audio_enc, visual_pre, stage1, stage2, ds_train, ds_eval)

    if stage2 is not None and config.second_visual_modality:
        scores = recognizer_predictions(config, stage1, stage2, ds_eval, "target")
        alt = synth.regenerate_visual(ds_train, seed=config.seed + 500)
        alt_cfg = replace(config, second_visual_modality=False, seed=config.seed + 50021)
        alt_run = run_experiment(alt_cfg, dataset=alt)
        alt_eval = synth.regenerate_visual(ds_eval, seed=config.seed + 500)
        alt_scores = recognizer_predictions(alt_cfg, alt_run.stage1, alt_run.stage2,
                                            alt_eval, "target")
        y = ds_eval.target_labels()
        kind, single = _metric_overall(scores, y, ds_eval.spec.multilabel)
        metrics[f"target_{kind}_modality1"] = single
        _, second = _metric_overall(alt_scores, y, ds_eval.spec.multilabel)
        metrics[f"target_{kind}_modality2"] = second
        fused = infer([scores, alt_scores])
        metrics.update(_target_metrics("target", fused, ds_eval))

    return RunResult(config=config, metrics=metrics, audio_encoder=audio_enc,
                     visual_pretrained=visual_pre, stage1=stage1, stage2=stage2,
                     timings=timings, dataset=ds_train)


def _source_probs_for_pseudo(config, ds, audio_enc, visual_enc) -> np.ndarray:
    with torch.no_grad():
        if config.pseudo_source == "audio":
            return audio_enc(_t(ds.audio_array("source")))[2].numpy()
        return visual_enc(_t(ds.visual_array("source")))[2].numpy()


# ---------------------------------------------------------------------------
# checkpoints


def save_module(module: torch.nn.Module, directory, meta: dict | None = None) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    store.save_arrays(directory, arrays, meta)


def load_module(module: torch.nn.Module, directory) -> torch.nn.Module:
    arrays, _ = store.load_arrays(directory)
    module.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    module.eval()
    return module


def save_checkpoints(result: RunResult, directory) -> dict[str, str]:
    """Write all model checkpoints of a run; returns name -> path."""
    from pathlib import Path

    directory = Path(directory)
    paths: dict[str, str] = {}
    parts: list[tuple[str, torch.nn.Module]] = [
        ("audio_encoder", result.audio_encoder),
        ("visual_pretrained", result.visual_pretrained),
        ("stage1_visual", result.stage1.encoder.visual),
    ]
    if result.stage1.encoder.attention is not None:
        parts.append(("stage1_attention", result.stage1.encoder.attention))
    if result.stage2 is not None:
        parts.append(("recognizer", result.stage2.recognizer))
        if result.stage2.bank is not None:
            parts.append(("bank", result.stage2.bank))
        if result.stage2.audio_finetuned is not None:
            parts.append(("audio_finetuned", result.stage2.audio_finetuned))
    for name, module in parts:
        path = directory / name
        save_module(module, path, meta={"part": name})
        paths[name] = str(path)
    return paths


def load_run_models(config: ExperimentConfig, directory):
    """Rebuild models from a checkpoint directory written by save_checkpoints."""
    from pathlib import Path

    directory = Path(directory)
    spec = config.data
    audio_enc = load_module(
        AudioEncoder(spec.C_a, config.model.hidden_audio, spec.K, spec.multilabel),
        directory / "audio_encoder")
    visual_pre = load_module(
        VisualEncoder(spec.C_v, config.model.hidden_visual, spec.K, spec.multilabel),
        directory / "visual_pretrained")
    stage1_visual = load_module(
        VisualEncoder(spec.C_v, config.model.hidden_visual, spec.K, spec.multilabel),
        directory / "stage1_visual")
    attention = None
    if (directory / "stage1_attention").exists():
        attention = load_module(
            AudioAttention(config.model.hidden_audio, config.model.att_dim,
                           config.model.hidden_visual, depth=config.model.att_depth,
                           heads=config.model.att_heads, max_clips=spec.n),
            directory / "stage1_attention")
    encoder = AudioAdaptiveEncoder(stage1_visual, audio_enc, attention)
    stage1 = Stage1Result(encoder=encoder, clusters=None, absent=None,
                          hard_targets=None, loss_trace=[])
    stage2 = None
    if (directory / "recognizer").exists():
        rec = load_module(
            Recognizer(config.model.hidden_visual, config.model.hidden_audio, spec.K,
                       dim=config.model.rec_dim, depth=config.model.rec_depth,
                       heads=config.model.rec_heads, max_clips=spec.n,
                       multilabel=spec.multilabel),
            directory / "recognizer")
        bank = None
        if (directory / "bank").exists():
            bank = load_module(
                SoundVectorBank(spec.K, config.model.rec_dim, config.model.hidden_audio,
                                config.model.hidden_visual, config.model.low_dim),
                directory / "bank")
        audio_ft = None
        if (directory / "audio_finetuned").exists():
            audio_ft = load_module(
                AudioEncoder(spec.C_a, config.model.hidden_audio, spec.K, spec.multilabel),
                directory / "audio_finetuned")
        stage2 = Stage2Result(recognizer=rec, bank=bank, audio_finetuned=audio_ft, loss_trace=[])
    return audio_enc, visual_pre, stage1, stage2


def run_baseline(kind: str, config: ExperimentConfig,
                 dataset: synth.Dataset | None = None) -> dict[str, float]:
    """Reference systems: source-only visual, audio-only, and late fusion."""
    if kind not in ("visual_only", "audio_only", "late_fusion"):
        raise PipelineError(f"unknown baseline {kind!r}")
    if dataset is None:
        _, ds_train, ds_eval = prepare_datasets(config)
    else:
        ds_train = ds_eval = dataset
    spec = ds_train.spec
    y = ds_eval.target_labels()
    metrics: dict[str, float] = {}
    if kind in ("visual_only", "late_fusion"):
        visual = pretrain_visual(config, ds_train)
        with torch.no_grad():
            p_v = visual(_t(ds_eval.visual_array("target")))[2].numpy()
    if kind in ("audio_only", "late_fusion"):
        audio = pretrain_audio(config, ds_train)
        with torch.no_grad():
            p_a = audio(_t(ds_eval.audio_array("target")))[2].numpy()
    if kind == "visual_only":
        scores = p_v
    elif kind == "audio_only":
        scores = p_a
    else:
        scores = infer([p_v, p_a])
    kind_name, value = _metric_overall(scores, y, spec.multilabel)
    metrics[f"target_{kind_name}"] = value
    return metrics
