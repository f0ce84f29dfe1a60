"""Two-phase optimization: pretrain the text-only backbone, freeze it,
then train the adapter and feature preprocessor against it.

Checkpoints use the package's binary tensor container plus a JSON
manifest (config snapshot, backbone fingerprint, step count, seed).
Wall time is written to a separate sidecar file so checkpoint bytes
stay a pure function of (seed, config, dataset).
"""

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffusion, kernels, nn
from .adapter import FoleySystem, SystemConfig, init_adapter_from_backbone
from .backbone import BackboneConfig, backbone_forward, fingerprint, \
    init_backbone
from .errors import ConfigError, ContractError, CorruptionError, DataError, \
    UnsupportedVersionError
from .features import HIDDEN_DIM, Preprocessor, preprocess_avclip_frames, \
    preprocess_fused_frames
from .rng import generator
from .tensor_store import read_tensors, write_tensors

CHECKPOINT_VERSION = 1
PHASES = ("backbone", "adapter")
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOG_EVERY = 50
DEFAULT_LR = {"backbone": 1e-3, "adapter": 5e-3}


@dataclass
class TrainConfig:
    phase: str
    steps: int
    batch_size: int = 16
    learning_rate: float = None
    weight_decay: float = 1e-2
    cond_drop_p: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    # Optional second-phase filter: train only on scenes with at least
    # this many events (None trains on everything).
    min_events: int = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(
                "phase must be one of %r, got %r" % (PHASES, self.phase)
            )
        if self.steps < 0:
            raise ConfigError("steps must be >= 0, got %d" % self.steps)
        if self.batch_size < 1:
            raise ConfigError(
                "batch_size must be >= 1, got %d" % self.batch_size
            )
        if not 0.0 <= self.cond_drop_p < 1.0:
            raise ConfigError(
                "cond_drop_p must be in [0, 1), got %r" % (self.cond_drop_p,)
            )
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.phase]
        if self.learning_rate <= 0:
            raise ConfigError(
                "learning_rate must be positive, got %r"
                % (self.learning_rate,)
            )


def adamw_step(params, grads, state, lr, betas=BETAS, eps=ADAM_EPS,
               weight_decay=1e-2):
    """One decoupled-weight-decay moment update over parallel lists.

    state holds first/second moments plus the 1-based step count and is
    created on first use; parameters update in place.
    """
    if len(params) != len(grads):
        raise ContractError(
            "%d params but %d grads" % (len(params), len(grads))
        )
    if not state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise ContractError(
                "grad shape %r does not match param shape %r"
                % (g.shape, p.shape)
            )
        kernels.adamw_update(
            p, np.ascontiguousarray(g, dtype=p.dtype), m, v, state["t"],
            lr, betas[0], betas[1], eps, weight_decay,
        )
    return params, state


class AdamW:
    """Optimizer over Parameter objects with global-norm gradient clipping."""

    def __init__(self, params, lr, weight_decay=1e-2, clip_norm=1.0,
                 betas=BETAS, eps=ADAM_EPS):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.betas = betas
        self.eps = eps
        self.state = {}

    def step(self):
        grads = []
        sq = 0.0
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
            grads.append(g)
        norm = np.sqrt(sq)
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
            grads = [g * scale for g in grads]
        adamw_step([p.data for p in self.params], grads, self.state,
                   self.lr, self.betas, self.eps, self.weight_decay)
        return norm


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    backbone_fingerprint: str
    step_count: int
    seed: int
    format_version: int = CHECKPOINT_VERSION
    wall_time_s: float = None
    losses: list = field(default_factory=list, repr=False)


def save_checkpoint(path, ckpt):
    manifest = {
        "format_version": ckpt.format_version,
        "kind": "checkpoint",
        "config": ckpt.config,
        "backbone_fingerprint": ckpt.backbone_fingerprint,
        "step_count": ckpt.step_count,
        "seed": ckpt.seed,
    }
    write_tensors(path, ckpt.tensors, manifest)
    if ckpt.wall_time_s is not None:
        with open(path + ".time.json", "w", encoding="utf-8") as fh:
            json.dump({"wall_time_s": ckpt.wall_time_s,
                       "step_count": ckpt.step_count}, fh)
            fh.write("\n")
    return path


def load_checkpoint(path):
    tensors, manifest = read_tensors(path)
    if not isinstance(manifest, dict) or manifest.get("kind") != "checkpoint":
        raise CorruptionError("%s is not a checkpoint file" % path)
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            "%s has checkpoint version %r; this build reads %d"
            % (path, version, CHECKPOINT_VERSION)
        )
    wall = None
    sidecar = path + ".time.json"
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as fh:
            wall = json.load(fh).get("wall_time_s")
    return Checkpoint(
        config=manifest["config"],
        tensors=tensors,
        backbone_fingerprint=manifest["backbone_fingerprint"],
        step_count=manifest["step_count"],
        seed=manifest["seed"],
        format_version=version,
        wall_time_s=wall,
    )


def _named_tensors(prefix, module):
    return {"%s.%s" % (prefix, name): p.data.copy()
            for name, p in module.parameters()}


def _restore(module, prefix, tensors):
    want = dict(module.parameters())
    seen = set()
    for key, value in tensors.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in want:
            raise CorruptionError("checkpoint names unknown tensor %r" % key)
        if want[name].data.shape != value.shape:
            raise CorruptionError(
                "tensor %r has shape %r, model expects %r"
                % (key, value.shape, want[name].data.shape)
            )
        want[name].data = value.copy()
        seen.add(name)
    missing = set(want) - seen
    if missing:
        raise CorruptionError(
            "checkpoint is missing tensors under %r: %s"
            % (prefix, ", ".join(sorted(missing)))
        )
    return module


def _backbone_config(ckpt):
    return BackboneConfig(**ckpt.config["backbone"])


def restore_backbone(ckpt):
    bb = init_backbone(_backbone_config(ckpt), ckpt.seed)
    _restore(bb, "backbone", ckpt.tensors)
    got = fingerprint(bb)
    if got != ckpt.backbone_fingerprint:
        raise CorruptionError(
            "restored backbone fingerprint %s does not match the recorded %s"
            % (got[:12], ckpt.backbone_fingerprint[:12])
        )
    return bb


def restore_system(ckpt, sys_cfg=None):
    """Rebuild the full sampling system from an adapter checkpoint."""
    if ckpt.config.get("phase") != "adapter":
        raise ConfigError(
            "checkpoint phase %r has no adapter" % ckpt.config.get("phase")
        )
    bb = restore_backbone(ckpt)
    bb.set_trainable(False)
    ad = init_adapter_from_backbone(bb, ckpt.seed, feature_dim=HIDDEN_DIM)
    _restore(ad, "adapter", ckpt.tensors)
    pre = Preprocessor(generator(ckpt.seed, "preprocessor"))
    _restore(pre, "preprocessor", ckpt.tensors)
    if sys_cfg is None:
        sys_cfg = SystemConfig(
            feature_mode=ckpt.config.get("feature_mode", "avclip"))
    return FoleySystem(bb, ad, pre, sys_cfg)


def schedule_from_config(config):
    """Noise schedule recorded in a checkpoint's config snapshot."""
    sched_cfg = config.get("schedule", {})
    return diffusion.build_schedule(
        sched_cfg.get("num_steps", 1000), sched_cfg.get("kind", "cosine"))


def _stacked(dataset, min_events=None):
    records = dataset.records
    if min_events:
        records = [r for r in records
                   if len(r.scene.event_times) >= min_events]
    if not records:
        raise DataError("no scenes left to train on")
    for r in records:
        if r.latent is None or r.latent.size == 0:
            raise DataError(
                "scene %d has no target latent" % r.scene.scene_id
            )
    return {
        "latents": np.stack([r.latent for r in records]),
        "avclip": np.stack([r.avclip for r in records]),
        "clip": np.stack([r.clip for r in records]),
        "audio_class": np.array(
            [r.scene.audio_class for r in records], dtype=np.int64),
    }


def _write_log(log_path, losses):
    if log_path is None:
        return
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,loss\n")
        for step, loss in losses:
            fh.write("%d,%s\n" % (step, repr(loss)))


def _train_phase(cfg, arrays, model_fn_for, trainables, sched, log_path):
    """Shared minibatch loop; model_fn_for(batch_indices, rng) builds the
    step's model function (preprocessing may consume the rng)."""
    opt = AdamW([p for _, p in trainables], cfg.learning_rate,
                cfg.weight_decay, cfg.grad_clip)
    rng = generator(cfg.seed, "train", cfg.phase)
    n = arrays["latents"].shape[0]
    losses = []
    start = time.monotonic()
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        model_fn = model_fn_for(idx, rng)
        loss = diffusion.training_loss(
            model_fn, arrays["latents"][idx], arrays["audio_class"][idx],
            sched, cfg.cond_drop_p, rng, null_id=arrays["null_id"])
        for _, p in trainables:
            p.grad = None
        nn.backward(loss)
        opt.step()
        if step % LOG_EVERY == 0 or step == cfg.steps - 1:
            losses.append((step, float(loss.data)))
    wall = time.monotonic() - start
    _write_log(log_path, losses)
    return losses, wall


def _data_meta(dataset):
    """Enough provenance to rebuild the dataset's class signatures."""
    return {
        "seed": dataset.seed,
        "k": dataset.k,
        "conflict_ratio": dataset.conflict_ratio,
        "n": len(dataset.records),
    }


def pretrain_backbone(dataset, cfg, bb_cfg=None, log_path=None):
    """Phase one: text-conditioned denoising on (latent, label) pairs.
    Video features are never touched."""
    if cfg.phase != "backbone":
        raise ConfigError("pretrain_backbone needs phase 'backbone'")
    if bb_cfg is None:
        bb_cfg = BackboneConfig(num_classes=dataset.k)
    arrays = _stacked(dataset, cfg.min_events)
    arrays["null_id"] = bb_cfg.num_classes
    sched = diffusion.build_schedule(1000, "cosine")
    bb = init_backbone(bb_cfg, cfg.seed)
    trainables = list(bb.parameters())

    def model_fn_for(idx, rng):
        def call(z_t, t_batch, ids):
            return backbone_forward(bb, z_t, t_batch, ids)
        return call

    losses, wall = _train_phase(
        cfg, arrays, model_fn_for, trainables, sched, log_path)
    return Checkpoint(
        config={
            "phase": "backbone",
            "train": asdict(cfg),
            "backbone": asdict(bb_cfg),
            "schedule": {"num_steps": sched.num_steps, "kind": sched.kind},
            "data": _data_meta(dataset),
        },
        tensors=_named_tensors("backbone", bb),
        backbone_fingerprint=fingerprint(bb),
        step_count=cfg.steps,
        seed=cfg.seed,
        wall_time_s=wall,
        losses=losses,
    )


def train_adapter(dataset, backbone_ckpt, cfg, feature_mode="avclip",
                  log_path=None):
    """Phase two: freeze the restored backbone, train adapter plus
    preprocessor on (features, label, latent) triples."""
    if cfg.phase != "adapter":
        raise ConfigError("train_adapter needs phase 'adapter'")
    bb = restore_backbone(backbone_ckpt)
    bb.set_trainable(False)
    frozen_before = fingerprint(bb)
    arrays = _stacked(dataset, cfg.min_events)
    arrays["null_id"] = bb.cfg.num_classes
    sched = schedule_from_config(backbone_ckpt.config)
    ad = init_adapter_from_backbone(bb, cfg.seed, feature_dim=HIDDEN_DIM)
    pre = Preprocessor(generator(cfg.seed, "preprocessor"))
    system = FoleySystem(bb, ad, pre)
    trainables = list(ad.parameters()) + list(pre.parameters())

    def model_fn_for(idx, rng):
        if feature_mode == "fused":
            e_v = preprocess_fused_frames(
                pre, arrays["avclip"][idx], arrays["clip"][idx],
                training=True, rng=rng)
        else:
            e_v = preprocess_avclip_frames(
                pre, arrays["avclip"][idx], training=True, rng=rng)
        return system.train_model_fn(e_v)

    losses, wall = _train_phase(
        cfg, arrays, model_fn_for, trainables, sched, log_path)
    frozen_after = fingerprint(bb)
    if frozen_after != frozen_before:
        raise ContractError(
            "frozen backbone changed during adapter training "
            "(fingerprint %s -> %s)"
            % (frozen_before[:12], frozen_after[:12])
        )
    tensors = _named_tensors("backbone", bb)
    tensors.update(_named_tensors("adapter", ad))
    tensors.update(_named_tensors("preprocessor", pre))
    return Checkpoint(
        config={
            "phase": "adapter",
            "train": asdict(cfg),
            "backbone": dict(backbone_ckpt.config["backbone"]),
            "schedule": dict(backbone_ckpt.config["schedule"]),
            "feature_mode": feature_mode,
            "data": _data_meta(dataset),
        },
        tensors=tensors,
        backbone_fingerprint=frozen_after,
        step_count=cfg.steps,
        seed=cfg.seed,
        wall_time_s=wall,
        losses=losses,
    )
