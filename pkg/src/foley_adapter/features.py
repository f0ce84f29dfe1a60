"""Temporal alignment and transformation of video feature streams.

Raw streams arrive on one of two grids: a dense segment grid (216 frames
per 10 s scene) and a sparse 5 fps grid (50 frames). Everything here maps
them onto the 216-frame latent grid and through small per-frame transform
stacks, producing the hidden sequence the adapter consumes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ContractError
from . import nn

SEGMENT_GRID = "segment_grid_216"
FPS5_GRID = "fps5_grid"

SEGMENT_LEN = 216
FPS5_LEN = 50
CLIP_RESAMPLE_LEN = 200  # 50-frame stream is upsampled x4 before padding

RAW_DIM = 16
HIDDEN_DIM = 32

_GRID_LEN = {SEGMENT_GRID: SEGMENT_LEN, FPS5_GRID: FPS5_LEN}


@dataclass
class FeatureStream:
    """One per-scene feature grid: `frames` is (N, D) on a named rate."""

    rate_kind: str
    frames: np.ndarray
    scene_seconds: float = 10.0

    def __post_init__(self):
        if self.rate_kind not in _GRID_LEN:
            raise ContractError(
                "unknown rate_kind %r (want %s or %s)"
                % (self.rate_kind, SEGMENT_GRID, FPS5_GRID)
            )
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ContractError(
                "stream frames must be (N, D), got shape %r"
                % (self.frames.shape,)
            )
        want = _GRID_LEN[self.rate_kind]
        if self.frames.shape[0] != want:
            raise ContractError(
                "%s stream must have %d frames, got %d"
                % (self.rate_kind, want, self.frames.shape[0])
            )
        if not np.all(np.isfinite(self.frames)):
            raise ContractError("stream frames contain non-finite values")


def linear_resample(frames, target_len):
    """Per-channel linear interpolation along the frame axis.

    Endpoints are preserved exactly. Works on (..., N, D); the frame axis
    is the second to last.
    """
    frames = np.asarray(frames)
    n = frames.shape[-2]
    if n < 2:
        raise ContractError("linear_resample needs >= 2 input frames, got %d" % n)
    if target_len < 2:
        raise ContractError(
            "linear_resample needs target_len >= 2, got %d" % target_len
        )
    idx = np.linspace(0.0, float(n - 1), target_len)
    lo = np.floor(idx).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = (idx - lo).astype(frames.dtype)[:, None]
    low = np.take(frames, lo, axis=-2)
    high = np.take(frames, hi, axis=-2)
    return low + (high - low) * frac


def pad_symmetric(frames, target_len):
    """Edge-replicate frames on both sides up to target_len (floor-left)."""
    frames = np.asarray(frames)
    m = frames.shape[-2]
    if target_len < m:
        raise ContractError(
            "pad_symmetric cannot shrink: have %d frames, target %d"
            % (m, target_len)
        )
    left = (target_len - m) // 2
    right = target_len - m - left
    if left == 0 and right == 0:
        return frames
    first = np.repeat(frames[..., :1, :], left, axis=-2)
    last = np.repeat(frames[..., -1:, :], right, axis=-2)
    return np.concatenate([first, frames, last], axis=-2)


class TransformBlock(nn.Module):
    """dense -> ReLU -> layer_norm -> dropout(0.1), applied per frame."""

    DROPOUT_RATE = 0.1

    def __init__(self, d_in, d_out, rng, dtype=np.float32):
        self.dense = nn.Dense(d_in, d_out, rng, init="scaled", dtype=dtype)
        self.norm = nn.LayerNorm(d_out, dtype=dtype)
        self.drop = nn.Dropout(self.DROPOUT_RATE)

    def __call__(self, x, training=False, rng=None):
        h = nn.relu(self.dense(x))
        h = self.norm(h)
        return self.drop(h, training=training, rng=rng)


class Preprocessor(nn.Module):
    """Trainable stack mapping raw streams to the (216, 32) hidden grid.

    block1 handles the dense segment stream, block_c the resampled sparse
    stream; block2 is shared by both paths.
    """

    def __init__(self, rng, raw_dim=RAW_DIM, hidden_dim=HIDDEN_DIM,
                 dtype=np.float32):
        self.block1 = TransformBlock(raw_dim, raw_dim, rng, dtype=dtype)
        self.block_c = TransformBlock(raw_dim, raw_dim, rng, dtype=dtype)
        self.block2 = TransformBlock(raw_dim, hidden_dim, rng, dtype=dtype)


def _require_kind(stream, kind, what):
    if stream.rate_kind != kind:
        raise ContractError(
            "%s must be on %s, got %s" % (what, kind, stream.rate_kind)
        )


def _as_input(frames):
    return nn.Tensor(np.asarray(frames, dtype=np.float32))


def align_clip_frames(frames, target_len=SEGMENT_LEN):
    """Map a sparse (..., 50, D) grid onto the segment grid: resample x4,
    then edge-pad the remainder symmetrically."""
    return pad_symmetric(linear_resample(frames, CLIP_RESAMPLE_LEN), target_len)


def preprocess_avclip(pre, stream, training=False, rng=None):
    """Dense-stream path: block1 then block2. Returns a (216, 32) Tensor."""
    _require_kind(stream, SEGMENT_GRID, "avclip stream")
    return preprocess_avclip_frames(pre, stream.frames, training, rng)


def preprocess_avclip_frames(pre, frames, training=False, rng=None):
    """Same as preprocess_avclip but on raw (..., 216, D) arrays."""
    h = pre.block1(_as_input(frames), training=training, rng=rng)
    return pre.block2(h, training=training, rng=rng)


def preprocess_fused(pre, av_stream, clip_stream, training=False, rng=None):
    """Dual-stream path: align the sparse stream onto the segment grid,
    run it through block_c, sum with the block1 output, share block2."""
    _require_kind(av_stream, SEGMENT_GRID, "avclip stream")
    _require_kind(clip_stream, FPS5_GRID, "clip stream")
    return preprocess_fused_frames(
        pre, av_stream.frames, clip_stream.frames, training, rng
    )


def preprocess_fused_frames(pre, av_frames, clip_frames, training=False,
                            rng=None):
    """Same as preprocess_fused but on raw (..., N, D) arrays."""
    av_frames = np.asarray(av_frames)
    aligned = align_clip_frames(clip_frames)
    if aligned.shape[-2] != av_frames.shape[-2]:
        raise AlignmentError(
            "clip path aligned to %d frames but segment grid has %d"
            % (aligned.shape[-2], av_frames.shape[-2])
        )
    h1 = pre.block1(_as_input(av_frames), training=training, rng=rng)
    hc = pre.block_c(_as_input(aligned), training=training, rng=rng)
    return pre.block2(nn.add(h1, hc), training=training, rng=rng)
