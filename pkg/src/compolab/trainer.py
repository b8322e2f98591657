"""Batch assembly, optimization loop, schedule, and checkpointing.

Stage 1 trains encoders, projector, and temperature against the composite
objective while the decoder stays frozen. Every random draw flows through one
generator seeded from the config, so (config, seed) fully determines the
metrics history; checkpoints snapshot the generator state so resumed runs
continue bit-identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .dataset import SceneDataset
from .evalharness import score_items, single_positive_accuracy, trace_from_results
from .losses import (
    LossComponents,
    LossWeights,
    composite_loss,
    hard_negative_contrastive_loss,
    sentence_alignment_loss,
    token_reconstruction_loss,
)
from .models import (
    ModelBundle,
    ModelConfig,
    init_bundle,
    pad_batch,
    save_bundle,
    load_bundle,
)
from .optim import AdamW
from .tensor import backward
from .world import render_image

__all__ = [
    "TrainConfig",
    "BatchSample",
    "TrainState",
    "NumericError",
    "load_config_file",
    "make_config",
    "config_hash",
    "lr_schedule",
    "sample_batch",
    "train_step",
    "run_training",
    "METRIC_KEYS",
]

RECON_TARGET_MODES = ("alternative", "original")
ALIGN_SOURCE_MODES = ("rule-paraphrase", "caption-set-union")

METRIC_KEYS = (
    "epoch", "loss_total", "loss_contrastive", "loss_recon", "loss_align",
    "acc_swap", "acc_replace", "acc_itt", "acc_tot",
    "sim_pos_pos", "sim_pos_neg", "tau",
)


class NumericError(RuntimeError):
    """Non-finite loss; carries the component breakdown for diagnosis."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    m_negatives: int = 3
    k_targets: int = 1
    alpha: float = 0.1
    beta: float = 0.5
    learning_rate: float = 3e-3
    warmup_steps: int = 50
    epochs: int = 30
    weight_decay: float = 0.01
    seed: int = 0
    recon_target: str = "alternative"
    align_source: str = "rule-paraphrase"
    num_paraphrases: int = 1
    noise_fraction: float = 0.0
    tau_shared: bool = True
    symmetric_negatives: bool = False
    clip_norm: float = 5.0
    checkpoint_every: int = 1
    n_scenes: int = 2000
    eval_items: int = 200
    total_steps: int | None = None

    def validate(self):
        if self.batch_size < 1 or self.m_negatives < 0 or self.k_targets < 1:
            raise ValueError(f"TrainConfig: counts must be positive: {self}")
        if self.batch_size < 2 and (self.m_negatives >= 1 or self.beta > 0):
            raise ValueError(
                "TrainConfig: batch_size >= 2 required when hard negatives or "
                "alignment are enabled (in-batch negatives need company)"
            )
        if self.recon_target not in RECON_TARGET_MODES:
            raise ValueError(f"TrainConfig: recon_target must be one of {RECON_TARGET_MODES}")
        if self.align_source not in ALIGN_SOURCE_MODES:
            raise ValueError(f"TrainConfig: align_source must be one of {ALIGN_SOURCE_MODES}")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("TrainConfig: noise_fraction outside [0, 1]")
        if self.num_paraphrases < 1:
            raise ValueError("TrainConfig: num_paraphrases must be >= 1")
        LossWeights(self.alpha, self.beta)
        return self


_BOOL_FIELDS = {"tau_shared", "symmetric_negatives"}


def load_config_file(path) -> dict:
    """Flat ``key = value`` lines mirroring TrainConfig field names."""
    values = {}
    valid = {f.name for f in dataclasses.fields(TrainConfig)}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in valid:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = raw
    return values


def make_config(file_values: dict | None = None, **overrides) -> TrainConfig:
    """Precedence: dataclass defaults < config file < explicit overrides."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    merged = {}
    for key, raw in (file_values or {}).items():
        ftype = fields[key].type
        if key in _BOOL_FIELDS:
            merged[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif ftype == "int" or ftype is int:
            merged[key] = int(raw)
        elif ftype == "float" or ftype is float:
            merged[key] = float(raw)
        else:
            merged[key] = raw.strip()
    for key, val in overrides.items():
        if val is not None:
            merged[key] = val
    return TrainConfig(**merged).validate()


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    if step < 0:
        raise ValueError(f"lr_schedule: negative step {step}")
    total = config.total_steps
    if total is None:
        raise ValueError("lr_schedule: config.total_steps is not set")
    peak = config.learning_rate
    warmup = config.warmup_steps
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    progress = min(1.0, (step - warmup) / (total - warmup))
    return peak * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class BatchSample:
    scene_indices: np.ndarray
    image_ids: np.ndarray        # (B, 6) visual tokens
    caption_ids: np.ndarray      # (B, L)
    caption_lengths: np.ndarray
    alt_ids: np.ndarray          # (B*K, L) reconstruction targets
    alt_lengths: np.ndarray
    neg_ids: np.ndarray | None   # (B*M, L)
    neg_lengths: np.ndarray | None
    para_ids: np.ndarray | None  # (B, L)
    para_lengths: np.ndarray | None


def sample_batch(dataset: SceneDataset, config: TrainConfig, rng: np.random.Generator,
                 scene_indices=None) -> BatchSample:
    """Draw one batch: per scene a caption, K reconstruction targets, M hard
    negatives (categories without replacement), one paraphrase, and a jittered
    rendering. Draw order is fixed, so a given rng state maps to one batch."""
    n = len(dataset)
    b = config.batch_size
    if n < b:
        raise ValueError(f"sample_batch: dataset of {n} scenes smaller than batch {b}")
    if config.num_paraphrases > dataset.num_p:
        raise ValueError(
            f"sample_batch: config asks for {config.num_paraphrases} paraphrase "
            f"candidates but the dataset pregenerated {dataset.num_p}"
        )
    if scene_indices is None:
        scene_indices = rng.choice(n, size=b, replace=False)
    scene_indices = np.asarray(scene_indices)

    images, captions, alts, negs, paras = [], [], [], [], []
    for si in scene_indices:
        si = int(si)
        scene = dataset.scenes[si]
        caps = dataset.captions[si]
        jitter = int(rng.integers(dataset.vocab.jitter_count))
        images.append(render_image(scene, jitter, dataset.vocab).token_ids)
        ci = int(rng.integers(len(caps)))
        captions.append(caps[ci].token_ids)

        if config.recon_target == "original":
            alts.extend([caps[ci].token_ids] * config.k_targets)
        else:
            others = [c.token_ids for j, c in enumerate(caps) if j != ci]
            if config.k_targets > len(others):
                raise ValueError(
                    f"sample_batch: k_targets={config.k_targets} exceeds the "
                    f"{len(others)} available alternatives"
                )
            pick = rng.choice(len(others), size=config.k_targets, replace=False)
            alts.extend(others[int(j)] for j in pick)

        if config.m_negatives > 0:
            pool = dataset.negatives[si][ci]
            if len(pool) < config.m_negatives:
                raise ValueError(
                    f"sample_batch: scene {scene.scene_id} caption {ci} has only "
                    f"{len(pool)} valid negatives, need {config.m_negatives}"
                )
            order = rng.permutation(len(pool))
            negs.extend(pool[int(j)].token_ids for j in order[: config.m_negatives])

        # paraphrases are drawn even at beta=0 so the rng sequence, and hence
        # batch composition, is identical across ablation rows
        if config.align_source == "caption-set-union":
            union = [c.token_ids for c in caps]
            for plist in dataset.paraphrases[si]:
                union.extend(p.token_ids for p in plist[: config.num_paraphrases])
            paras.append(union[int(rng.integers(len(union)))])
        else:
            cands = dataset.paraphrases[si][ci][: config.num_paraphrases]
            paras.append(cands[int(rng.integers(len(cands)))].token_ids)

    caption_ids, caption_lengths = pad_batch(captions)
    alt_ids, alt_lengths = pad_batch(alts)
    neg_ids = neg_lengths = para_ids = para_lengths = None
    if negs:
        neg_ids, neg_lengths = pad_batch(negs)
    if paras:
        para_ids, para_lengths = pad_batch(paras)
    return BatchSample(
        scene_indices=scene_indices,
        image_ids=np.array(images),
        caption_ids=caption_ids, caption_lengths=caption_lengths,
        alt_ids=alt_ids, alt_lengths=alt_lengths,
        neg_ids=neg_ids, neg_lengths=neg_lengths,
        para_ids=para_ids, para_lengths=para_lengths,
    )


@dataclass
class TrainState:
    bundle: ModelBundle
    opt: AdamW
    step: int = 0


def train_step(state: TrainState, batch: BatchSample, config: TrainConfig) -> dict:
    """One forward/backward/update. Zero-weighted components are skipped
    (reported as 0.0), which leaves gradients bit-identical to a run that
    never builds them."""
    bundle = state.bundle
    if not bundle.decoder.frozen:
        raise ValueError("train_step: decoder must be frozen during fine-tuning")
    u = bundle.image_encoder.encode_batch(batch.image_ids)
    v = bundle.text_encoder.encode_batch(batch.caption_ids, batch.caption_lengths)
    tau = bundle.temperature.tau_tensor()

    v_neg = None
    if config.m_negatives > 0 and batch.neg_ids is not None:
        v_neg = bundle.text_encoder.encode_batch(batch.neg_ids, batch.neg_lengths)
    contrastive = hard_negative_contrastive_loss(
        u, v, v_neg, tau, symmetric=config.symmetric_negatives
    )

    recon = None
    if config.alpha > 0:
        h = bundle.projector.project_batch(v)
        recon = token_reconstruction_loss(
            h, batch.alt_ids, batch.alt_lengths, bundle.decoder, config.k_targets
        )

    align = None
    if config.beta > 0:
        if batch.para_ids is None:
            raise ValueError("train_step: beta > 0 but the batch has no paraphrases")
        v_para = bundle.text_encoder.encode_batch(batch.para_ids, batch.para_lengths)
        tau_align = tau
        if not config.tau_shared:
            if bundle.align_temperature is None:
                raise ValueError("train_step: tau_shared=False needs an alignment temperature")
            tau_align = bundle.align_temperature.tau_tensor()
        align = sentence_alignment_loss(v, v_para, tau_align)

    total = composite_loss(
        LossComponents(contrastive=contrastive, reconstruction=recon, alignment=align),
        LossWeights(config.alpha, config.beta),
    )
    breakdown = {
        "loss_total": float(total.data),
        "loss_contrastive": float(contrastive.data),
        "loss_recon": float(recon.data) if recon is not None else 0.0,
        "loss_align": float(align.data) if align is not None else 0.0,
        "tau": bundle.temperature.tau,
    }
    if not np.isfinite(breakdown["loss_total"]):
        raise NumericError(f"non-finite loss at step {state.step}: {breakdown}")

    state.opt.zero_grad()
    backward(total)
    state.opt.step(lr=lr_schedule(state.step, config))
    bundle.clamp()
    state.step += 1
    return breakdown


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _metrics_row(epoch, loss_means, suites_acc, trace, tau) -> dict:
    row = {
        "epoch": epoch,
        "loss_total": loss_means["loss_total"],
        "loss_contrastive": loss_means["loss_contrastive"],
        "loss_recon": loss_means["loss_recon"],
        "loss_align": loss_means["loss_align"],
        "acc_swap": suites_acc.get("swap"),
        "acc_replace": suites_acc.get("replace"),
        "acc_itt": suites_acc.get("itt"),
        "acc_tot": suites_acc.get("tot"),
        "sim_pos_pos": trace.pos_pos if trace else None,
        "sim_pos_neg": 0.5 * (trace.pos1_neg + trace.pos2_neg) if trace else None,
        "tau": tau,
    }
    return row


def evaluate_bundle(bundle: ModelBundle, suites: dict, epoch: int):
    """Benchmark accuracies plus the paraphrase-pair similarity trace."""
    acc = {}
    trace = None
    if suites.get("swap"):
        acc["swap"] = single_positive_accuracy(bundle, suites["swap"])
    if suites.get("replace"):
        acc["replace"] = single_positive_accuracy(bundle, suites["replace"])
    if suites.get("paraphrase"):
        results = score_items(bundle, suites["paraphrase"])
        acc["itt"] = float(np.mean([r.correct_itt for r in results]))
        acc["tot"] = float(np.mean([r.correct_tot for r in results]))
        trace = trace_from_results(results, epoch=epoch)
    return acc, trace


def run_training(config: TrainConfig, dataset: SceneDataset, decoder, suites: dict,
                 out_dir, resume_from=None, quiet=True):
    """Full stage-1 run: per-epoch metrics JSONL plus periodic checkpoints.

    ``suites`` maps {"swap", "replace", "paraphrase"} to benchmark item lists;
    missing suites simply leave their metric columns null. Returns the list of
    metric rows and the path of the final checkpoint.
    """
    config = dataclasses.replace(config)
    config.validate()
    if not decoder.frozen:
        raise ValueError("run_training: decoder checkpoint must be frozen")
    os.makedirs(out_dir, exist_ok=True)
    n = len(dataset)
    steps_per_epoch = n // config.batch_size
    if steps_per_epoch < 1:
        raise ValueError("run_training: dataset smaller than one batch")
    config.total_steps = steps_per_epoch * config.epochs

    model_cfg = ModelConfig.from_vocab(dataset.vocab)
    frozen_hash = decoder.param_hash()

    start_epoch = 0
    metrics: list = []
    if resume_from is None:
        bundle = init_bundle(
            model_cfg, seed=config.seed, decoder=decoder, shared_tau=config.tau_shared
        )
        opt = AdamW(
            bundle.trainable_params(), lr=config.learning_rate,
            weight_decay=config.weight_decay, clip_norm=config.clip_norm,
        )
        state = TrainState(bundle=bundle, opt=opt, step=0)
        rng = np.random.default_rng(np.random.SeedSequence((int(config.seed), 40)))
        mode = "w"
    else:
        bundle, header, extra = load_bundle(resume_from)
        meta = header["meta"]
        if meta.get("config_hash") != config_hash(config):
            raise ValueError(
                "run_training: resume checkpoint was produced under a different config"
            )
        bundle.decoder.freeze()
        opt = AdamW(
            bundle.trainable_params(), lr=config.learning_rate,
            weight_decay=config.weight_decay, clip_norm=config.clip_norm,
        )
        opt.load_state_blobs(extra, meta["opt_step"])
        state = TrainState(bundle=bundle, opt=opt, step=meta["step"])
        rng = _rng_from_json(json.loads(meta["rng_state"]))
        start_epoch = meta["epoch"]
        metrics = list(meta.get("metrics", []))
        mode = "a"

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    final_ckpt = os.path.join(out_dir, "final.ckpt")
    with open(metrics_path, mode, encoding="utf-8") as mfh:
        for epoch in range(start_epoch + 1, config.epochs + 1):
            sums = {"loss_total": 0.0, "loss_contrastive": 0.0,
                    "loss_recon": 0.0, "loss_align": 0.0}
            perm = rng.permutation(n)
            for s in range(steps_per_epoch):
                chunk = perm[s * config.batch_size:(s + 1) * config.batch_size]
                batch = sample_batch(dataset, config, rng, scene_indices=chunk)
                breakdown = train_step(state, batch, config)
                for k in sums:
                    sums[k] += breakdown[k]
            means = {k: v / steps_per_epoch for k, v in sums.items()}
            acc, trace = evaluate_bundle(state.bundle, suites, epoch)
            row = _metrics_row(epoch, means, acc, trace, state.bundle.temperature.tau)
            metrics.append(row)
            mfh.write(json.dumps(row) + "\n")
            mfh.flush()
            if not quiet:
                print(json.dumps(row))
            if state.bundle.decoder.param_hash() != frozen_hash:
                raise RuntimeError(f"frozen decoder parameters drifted at epoch {epoch}")
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                _save_train_checkpoint(
                    os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt"),
                    state, rng, config, epoch, metrics,
                )
    _save_train_checkpoint(final_ckpt, state, rng, config, config.epochs, metrics)
    return metrics, final_ckpt


def _save_train_checkpoint(path, state: TrainState, rng, config: TrainConfig,
                           epoch: int, metrics: list):
    meta = {
        "epoch": epoch,
        "step": state.step,
        "opt_step": state.opt.step_count,
        "config_hash": config_hash(config),
        "rng_state": json.dumps(_rng_state_to_json(rng)),
        "metrics": metrics,
    }
    save_bundle(path, state.bundle, meta=meta, extra_blobs=state.opt.state_blobs())
