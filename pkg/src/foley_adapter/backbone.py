"""Text-conditioned latent diffusion transformer.

A small DiT stack over (216, 8) latent sequences: class-embedding text
conditioning, sinusoidal timestep embedding, adaptive layer-norm
modulation inside each block, and additive injection ports that a
modality adapter can drive. Frozen after pretraining; the fingerprint
makes the freeze checkable.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError
from .rng import generator


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 8
    frames: int = 216
    hidden_width: int = 32
    num_blocks: int = 2
    heads: int = 4
    num_classes: int = 12

    def __post_init__(self):
        for name in ("latent_channels", "frames", "hidden_width",
                     "num_blocks", "heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError("%s must be positive" % name)
        if self.hidden_width % self.heads:
            raise ConfigError(
                "hidden_width %d not divisible by heads %d"
                % (self.hidden_width, self.heads)
            )


@dataclass(frozen=True)
class TextCondition:
    """A class label, or None for the learned null condition."""

    class_id: object = None


NULL_CONDITION = TextCondition(None)


@dataclass
class InjectionBundle:
    """Additive signals an adapter feeds into the backbone."""

    input_injection: object = None
    block_injections: object = None


def timestep_features(t, dim):
    """Sinusoidal features of integer timesteps, shape (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((t.size, 1))], axis=1)
    return feats.astype(np.float32)


class DiTBlock(nn.Module):
    """Pre-norm attention + MLP, both modulated by shift/scale pairs
    computed from the conditioning vector."""

    def __init__(self, width, heads, rng):
        self.width = width
        self.norm1 = nn.LayerNorm(width, affine=False)
        self.attn = nn.SelfAttention(width, heads, rng)
        self.norm2 = nn.LayerNorm(width, affine=False)
        self.mlp = nn.MlpBlock(width, rng)
        self.ada = nn.Dense(width, 4 * width, rng, init="normal", std=0.02)

    def _modulation(self, cond, lift):
        m = self.ada(cond)
        parts = []
        for i in range(4):
            p = nn.slice_axis(m, -1, i * self.width, (i + 1) * self.width)
            if lift:
                p = nn.reshape(p, (p.data.shape[0], 1, self.width))
            parts.append(p)
        return parts

    def __call__(self, x, cond):
        lift = x.data.ndim == 3 and cond.data.ndim == 2
        shift1, scale1, shift2, scale2 = self._modulation(cond, lift)

        def modulate(y, shift, scale):
            return nn.add(nn.add(y, nn.mul(y, scale)), shift)

        h = nn.add(x, self.attn(modulate(self.norm1(x), shift1, scale1)))
        return nn.add(h, self.mlp(modulate(self.norm2(h), shift2, scale2)))


class Backbone(nn.Module):
    def __init__(self, cfg, rng):
        c, h = cfg.latent_channels, cfg.hidden_width
        self.cfg = cfg
        self.in_proj = nn.Dense(c, h, rng, init="scaled")
        self.pos_emb = nn.Parameter(
            rng.normal(0.0, 0.02, size=(cfg.frames, h)).astype(np.float32))
        # Row num_classes is the learned null-condition embedding.
        self.class_table = nn.Parameter(
            rng.normal(0.0, 0.02,
                       size=(cfg.num_classes + 1, h)).astype(np.float32))
        self.t_proj = nn.Dense(h, h, rng, init="scaled")
        self.blocks = [DiTBlock(h, cfg.heads, rng)
                       for _ in range(cfg.num_blocks)]
        self.out_proj = nn.Dense(h, c, init="zeros")

    @property
    def null_id(self):
        return self.cfg.num_classes


def init_backbone(cfg, seed):
    """Fresh backbone; bit-identical for identical (cfg, seed)."""
    return Backbone(cfg, generator(seed, "backbone"))


def condition_ids(c, num_classes):
    """Normalize a condition to an id array (null maps to num_classes)."""
    if isinstance(c, TextCondition):
        if c.class_id is not None and \
                not 0 <= int(c.class_id) < num_classes:
            raise IndexError(
                "class id %r out of range [0, %d)"
                % (c.class_id, num_classes)
            )
        c = c.class_id
    if c is None:
        c = num_classes
    ids = np.atleast_1d(np.asarray(c, dtype=np.int64))
    if np.any(ids < 0) or np.any(ids > num_classes):
        raise IndexError(
            "condition id out of range [0, %d]: %r" % (num_classes, c)
        )
    return ids


def embed_condition(bb, c):
    """Embedding row for a TextCondition (null row for NULL)."""
    ids = condition_ids(c, bb.cfg.num_classes)
    row = nn.embedding(bb.class_table, ids)
    return nn.reshape(row, (bb.cfg.hidden_width,))


def _check_injection(inj, cfg):
    """Returns (input_inj, block_injs) as Tensors or Nones."""
    if inj is None:
        return None, None
    want_tail = {
        "input": (cfg.frames, cfg.latent_channels),
        "block": (cfg.frames, cfg.hidden_width),
    }

    def as_tensor(x, kind, label):
        if not isinstance(x, nn.Tensor):
            x = nn.Tensor(np.asarray(x))
        tail = x.data.shape[-2:]
        if x.data.ndim not in (2, 3) or tail != want_tail[kind]:
            raise DimensionError(
                "%s injection must end in %r, got shape %r"
                % (label, want_tail[kind], x.data.shape)
            )
        return x

    input_inj = None
    if inj.input_injection is not None:
        input_inj = as_tensor(inj.input_injection, "input", "input")
    block_injs = None
    if inj.block_injections is not None:
        if len(inj.block_injections) != cfg.num_blocks:
            raise DimensionError(
                "expected %d block injections, got %d"
                % (cfg.num_blocks, len(inj.block_injections))
            )
        block_injs = [
            as_tensor(x, "block", "block %d" % i)
            for i, x in enumerate(inj.block_injections)
        ]
    return input_inj, block_injs


def backbone_forward(bb, z_t, t, c, inj=None):
    """v prediction for z_t at step t under condition c.

    Accepts a single (T, C) sequence or a batch (N, T, C); t and c
    broadcast accordingly. inj carries optional additive signals.
    """
    cfg = bb.cfg
    if not isinstance(z_t, nn.Tensor):
        z_t = nn.Tensor(np.asarray(z_t))
    batched = z_t.data.ndim == 3
    if z_t.data.ndim not in (2, 3) or \
            z_t.data.shape[-2:] != (cfg.frames, cfg.latent_channels):
        raise DimensionError(
            "z_t must end in (%d, %d), got shape %r"
            % (cfg.frames, cfg.latent_channels, z_t.data.shape)
        )
    x = z_t if batched else nn.reshape(
        z_t, (1, cfg.frames, cfg.latent_channels))
    n = x.data.shape[0]

    input_inj, block_injs = _check_injection(inj, cfg)
    if input_inj is not None:
        x = nn.add(x, input_inj)

    ids = condition_ids(c, cfg.num_classes)
    if ids.size == 1 and n > 1:
        ids = np.repeat(ids, n)
    if ids.size != n:
        raise DimensionError(
            "got %d condition ids for a batch of %d" % (ids.size, n)
        )
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t_arr.size == 1 and n > 1:
        t_arr = np.repeat(t_arr, n)
    if t_arr.size != n:
        raise DimensionError(
            "got %d timesteps for a batch of %d" % (t_arr.size, n)
        )

    h = nn.add(bb.in_proj(x), bb.pos_emb)
    t_emb = bb.t_proj(nn.Tensor(timestep_features(t_arr, cfg.hidden_width)))
    h = nn.add(h, nn.reshape(t_emb, (n, 1, cfg.hidden_width)))
    cond_vec = nn.add(t_emb, nn.embedding(bb.class_table, ids))

    for i, block in enumerate(bb.blocks):
        h = block(h, cond_vec)
        if block_injs is not None:
            h = nn.add(h, block_injs[i])
    out = bb.out_proj(h)
    if not batched:
        out = nn.reshape(out, (cfg.frames, cfg.latent_channels))
    return out


def fingerprint(module):
    """Order-stable SHA-256 over every parameter's name, shape, bytes."""
    digest = hashlib.sha256()
    for name, p in sorted(module.parameters(), key=lambda kv: kv[0]):
        digest.update(name.encode("utf-8"))
        digest.update(repr(p.data.shape).encode("ascii"))
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def param_count(module):
    return sum(p.data.size for _, p in module.parameters())
