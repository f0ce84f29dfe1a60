"""Trainable modality adapter and the combined sampling system.

The adapter replicates the backbone's transformer blocks, consumes the
preprocessed video features, and feeds signals back into the backbone
through zero-initialized dense bridges. Starting at exactly zero, the
combined system reproduces the frozen backbone bit for bit until
training moves the bridge weights.

At inference the unconditional path's contribution can be attenuated by
alpha_asym in [0, 1]; 1 recovers standard classifier-free guidance, 0
removes the adapter from the unconditional branch entirely.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import diffusion, nn
from .backbone import (DiTBlock, InjectionBundle, backbone_forward,
                       condition_ids, timestep_features)
from .errors import AlignmentError, ConfigError, ContractError
from .features import HIDDEN_DIM, preprocess_avclip_frames, \
    preprocess_fused_frames
from .rng import generator

CONDITIONAL = "conditional"
UNCONDITIONAL = "unconditional"
_PATHS = (CONDITIONAL, UNCONDITIONAL)

ASYM_POINTS = ("post_fc", "pre_fc")
FEATURE_MODES = ("avclip", "fused")


@dataclass
class AdapterOutput:
    """Injection tensors for one forward pass, tagged with the CFG path
    they belong to."""

    input_injection: object
    block_injections: list
    path: str

    def __post_init__(self):
        if self.path not in _PATHS:
            raise ContractError("unknown path %r" % (self.path,))


class Adapter(nn.Module):
    def __init__(self, frozen, blocks, zero_fc_in, zero_fc_blocks):
        self.blocks = blocks
        self.zero_fc_in = zero_fc_in
        self.zero_fc_blocks = zero_fc_blocks
        self._frozen = frozen

    @property
    def frozen_backbone(self):
        return self._frozen


def _copy_block(src, cfg):
    block = DiTBlock(cfg.hidden_width, cfg.heads, generator(0, "scratch"))
    src_params = dict(src.parameters())
    for name, p in block.parameters():
        p.data = src_params[name].data.copy()
    return block


def init_adapter_from_backbone(bb, seed=None, feature_dim=HIDDEN_DIM):
    """Replicate the backbone blocks bit-exactly and attach all-zero
    bridge layers.

    seed is accepted for interface stability but unused: every new
    parameter is either a copy or exactly zero.
    """
    cfg = bb.cfg
    blocks = [_copy_block(b, cfg) for b in bb.blocks]
    zero_fc_in = nn.Dense(feature_dim, cfg.latent_channels, init="zeros")
    zero_fc_blocks = [
        nn.Dense(cfg.hidden_width, cfg.hidden_width, init="zeros")
        for _ in range(cfg.num_blocks)
    ]
    return Adapter(bb, blocks, zero_fc_in, zero_fc_blocks)


def adapter_forward(ad, z_t, t, c, E_v, path=CONDITIONAL,
                    pre_fc_alpha=None, scale_input=True):
    """Run the adapter trunk and emit injection tensors.

    E_v is the preprocessed feature sequence, (T, P) or batched
    (N, T, P); its temporal length must already equal the latent length
    (resampling belongs to the features module). pre_fc_alpha, when set
    and path is unconditional, scales the bridge inputs before their
    zero-FC projections instead of scaling afterwards.
    """
    bb = ad.frozen_backbone
    cfg = bb.cfg
    if path not in _PATHS:
        raise ContractError("unknown path %r" % (path,))
    if not isinstance(z_t, nn.Tensor):
        z_t = nn.Tensor(np.asarray(z_t))
    batched = z_t.data.ndim == 3
    if z_t.data.ndim not in (2, 3) or \
            z_t.data.shape[-2:] != (cfg.frames, cfg.latent_channels):
        raise AlignmentError(
            "z_t must end in (%d, %d), got shape %r"
            % (cfg.frames, cfg.latent_channels, z_t.data.shape)
        )
    if not isinstance(E_v, nn.Tensor):
        E_v = nn.Tensor(np.asarray(E_v))
    if E_v.data.ndim not in (2, 3) or E_v.data.shape[-2] != cfg.frames:
        raise AlignmentError(
            "E_v temporal length %r does not match the %d latent frames"
            % (E_v.data.shape, cfg.frames)
        )

    x = z_t if batched else nn.reshape(
        z_t, (1, cfg.frames, cfg.latent_channels))
    n = x.data.shape[0]
    attenuate = pre_fc_alpha is not None and path == UNCONDITIONAL
    raw_input_inj = ad.zero_fc_in(E_v)
    if attenuate and scale_input:
        input_inj = ad.zero_fc_in(nn.scale(E_v, float(pre_fc_alpha)))
    else:
        input_inj = raw_input_inj

    ids = condition_ids(c, cfg.num_classes)
    if ids.size == 1 and n > 1:
        ids = np.repeat(ids, n)
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t_arr.size == 1 and n > 1:
        t_arr = np.repeat(t_arr, n)

    h = nn.add(bb.in_proj(nn.add(x, raw_input_inj)), bb.pos_emb)
    t_emb = bb.t_proj(nn.Tensor(timestep_features(t_arr, cfg.hidden_width)))
    h = nn.add(h, nn.reshape(t_emb, (n, 1, cfg.hidden_width)))
    cond_vec = nn.add(t_emb, nn.embedding(bb.class_table, ids))

    block_injs = []
    for block, fc in zip(ad.blocks, ad.zero_fc_blocks):
        h = block(h, cond_vec)
        src = nn.scale(h, float(pre_fc_alpha)) if attenuate else h
        block_injs.append(fc(src))

    if not batched:
        shape_in = (cfg.frames, cfg.latent_channels)
        input_inj = nn.reshape(input_inj, shape_in) \
            if input_inj.data.ndim == 3 else input_inj
        block_injs = [
            nn.reshape(bi, (cfg.frames, cfg.hidden_width)) for bi in block_injs
        ]
    return AdapterOutput(input_inj, block_injs, path)


def apply_asymmetric_scale(out, alpha_asym, scale_input=True):
    """Attenuate an unconditional-path output's injections by alpha_asym.

    Conditional outputs and alpha_asym == 1 pass through unchanged (the
    very same object, so downstream comparisons stay bit-exact).
    """
    alpha = float(alpha_asym)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha_asym must lie in [0, 1], got %r" % alpha_asym)
    if out.path != UNCONDITIONAL or alpha == 1.0:
        return out
    input_inj = out.input_injection
    if scale_input:
        input_inj = nn.scale(input_inj, alpha)
    return AdapterOutput(
        input_inj,
        [nn.scale(b, alpha) for b in out.block_injections],
        out.path,
    )


@dataclass
class SystemConfig:
    """Inference-time wiring for the combined backbone plus adapter."""

    guide: diffusion.GuidanceParams = diffusion.GuidanceParams()
    asym_point: str = "post_fc"
    scale_input: bool = True
    feature_mode: str = "avclip"

    def __post_init__(self):
        if self.asym_point not in ASYM_POINTS:
            raise ConfigError(
                "asym_point must be one of %r, got %r"
                % (ASYM_POINTS, self.asym_point)
            )
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(
                "feature_mode must be one of %r, got %r"
                % (FEATURE_MODES, self.feature_mode)
            )


class FoleySystem:
    """Frozen backbone + adapter + preprocessor, exposed through the
    callables the diffusion loops expect."""

    def __init__(self, bb, ad, pre, sys_cfg=None):
        self.backbone = bb
        self.adapter = ad
        self.preprocessor = pre
        self.sys_cfg = sys_cfg if sys_cfg is not None else SystemConfig()

    def features_for(self, avclip_frames, clip_frames=None, training=False,
                     rng=None):
        """Preprocessed E_v per the configured feature mode."""
        if self.sys_cfg.feature_mode == "fused":
            if clip_frames is None:
                raise ContractError(
                    "fused feature mode needs the sparse clip stream"
                )
            return preprocess_fused_frames(
                self.preprocessor, avclip_frames, clip_frames,
                training=training, rng=rng)
        return preprocess_avclip_frames(
            self.preprocessor, avclip_frames, training=training, rng=rng)

    def _injection(self, z, t, cond, E_v, path):
        cfg = self.sys_cfg
        pre_alpha = None
        if cfg.asym_point == "pre_fc":
            pre_alpha = cfg.guide.alpha_asym
        out = adapter_forward(
            self.adapter, z, t, cond, E_v, path=path,
            pre_fc_alpha=pre_alpha, scale_input=cfg.scale_input)
        if cfg.asym_point == "post_fc":
            out = apply_asymmetric_scale(
                out, cfg.guide.alpha_asym, cfg.scale_input)
        return InjectionBundle(out.input_injection, out.block_injections)

    def model_pair(self, class_id, E_v):
        """(z, t, path) callable for the guided sampler."""

        def call(z, t, path):
            cond = class_id if path == CONDITIONAL else None
            inj = self._injection(z, t, cond, E_v, path)
            out = backbone_forward(self.backbone, z, t, cond, inj)
            return out.data

        return call

    def backbone_only_pair(self, class_id):
        """Same interface with the adapter absent (text-only sampling)."""

        def call(z, t, path):
            cond = class_id if path == CONDITIONAL else None
            return backbone_forward(self.backbone, z, t, cond).data

        return call

    def train_model_fn(self, E_v_batch):
        """(z_t, t_batch, ids) callable for training_loss; no asymmetric
        scaling is applied during training."""

        def call(z_t, t_batch, ids):
            out = adapter_forward(
                self.adapter, z_t, t_batch, ids, E_v_batch, path=CONDITIONAL)
            inj = InjectionBundle(out.input_injection, out.block_injections)
            return backbone_forward(self.backbone, z_t, t_batch, ids, inj)

        return call

    def with_guide(self, guide):
        return FoleySystem(self.backbone, self.adapter, self.preprocessor,
                           replace(self.sys_cfg, guide=guide))
