"""Diffusion transformer: config, conditioning, forward, fingerprint."""

import numpy as np
import pytest

from foley_adapter import backbone as B
from foley_adapter import nn
from foley_adapter.errors import ConfigError, DimensionError
from foley_adapter.rng import generator

TINY = B.BackboneConfig(latent_channels=2, frames=6, hidden_width=4,
                        num_blocks=1, heads=2, num_classes=3)


def hand_param_count(cfg):
    """Closed-form count from the layer shapes, written out by hand."""
    c, t, h = cfg.latent_channels, cfg.frames, cfg.hidden_width
    k, b = cfg.num_classes, cfg.num_blocks
    per_block = (
        (h * 3 * h + 3 * h)      # qkv
        + (h * h + h)            # attention out
        + (h * 4 * h + 4 * h)    # mlp up
        + (4 * h * h + h)        # mlp down
        + (h * 4 * h + 4 * h)    # adaLN modulation
    )
    return (
        (c * h + h)              # input projection
        + t * h                  # positional embedding
        + (k + 1) * h            # class table with null row
        + (h * h + h)            # timestep projection
        + b * per_block
        + (h * c + c)            # output projection
    )


def perturb_out_proj(bb, seed=0):
    """The output projection starts at zero; make it nonzero so the
    network's output reflects its internals."""
    g = generator(seed, "perturb")
    bb.out_proj.w.data = g.normal(
        0.0, 0.5, size=bb.out_proj.w.data.shape
    ).astype(bb.out_proj.w.data.dtype)
    return bb


class TestConfig:
    def test_defaults(self):
        cfg = B.BackboneConfig()
        assert (cfg.latent_channels, cfg.frames, cfg.hidden_width,
                cfg.num_blocks, cfg.heads, cfg.num_classes) == \
               (8, 216, 32, 2, 4, 12)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            B.BackboneConfig(hidden_width=30, heads=4)

    def test_nonpositive_fields_rejected(self):
        with pytest.raises(ConfigError):
            B.BackboneConfig(num_blocks=0)
        with pytest.raises(ConfigError):
            B.BackboneConfig(latent_channels=-1, heads=1, hidden_width=4)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = B.init_backbone(B.BackboneConfig(), 5)
        b = B.init_backbone(B.BackboneConfig(), 5)
        pa, pb = dict(a.parameters()), dict(b.parameters())
        assert pa.keys() == pb.keys()
        for name in pa:
            assert np.array_equal(pa[name].data, pb[name].data), name

    def test_different_seeds_differ(self):
        a = B.init_backbone(B.BackboneConfig(), 1)
        b = B.init_backbone(B.BackboneConfig(), 2)
        assert not np.array_equal(a.in_proj.w.data, b.in_proj.w.data)

    def test_param_count_matches_hand_count(self):
        for cfg in (B.BackboneConfig(), TINY):
            bb = B.init_backbone(cfg, 0)
            assert B.param_count(bb) == hand_param_count(cfg)

    def test_default_param_count_value(self):
        assert hand_param_count(B.BackboneConfig()) == 42536

    def test_output_projection_starts_at_zero(self):
        bb = B.init_backbone(B.BackboneConfig(), 3)
        assert not bb.out_proj.w.data.any()
        assert not bb.out_proj.b.data.any()


class TestEmbedCondition:
    bb = B.init_backbone(B.BackboneConfig(), 9)

    def test_null_is_last_row_and_stable(self):
        a = B.embed_condition(self.bb, B.NULL_CONDITION)
        b = B.embed_condition(self.bb, B.TextCondition(None))
        assert np.array_equal(a.data, self.bb.class_table.data[12])
        assert np.array_equal(a.data, b.data)

    def test_same_id_identical(self):
        a = B.embed_condition(self.bb, B.TextCondition(4))
        b = B.embed_condition(self.bb, B.TextCondition(4))
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(a.data, self.bb.class_table.data[4])

    def test_out_of_range_id_rejected(self):
        with pytest.raises(IndexError):
            B.embed_condition(self.bb, B.TextCondition(12))
        with pytest.raises(IndexError):
            B.embed_condition(self.bb, B.TextCondition(-1))


class TestForward:
    def _bb(self, seed=7):
        return perturb_out_proj(B.init_backbone(TINY, seed))

    def test_single_and_batched_shapes(self):
        bb = self._bb()
        z1 = generator(0, "z").normal(size=(6, 2)).astype(np.float32)
        zb = generator(1, "z").normal(size=(3, 6, 2)).astype(np.float32)
        assert B.backbone_forward(bb, z1, 10, B.TextCondition(1)).data.shape \
            == (6, 2)
        out = B.backbone_forward(
            bb, zb, np.array([1, 2, 3]), np.array([0, 1, 2]))
        assert out.data.shape == (3, 6, 2)

    def test_zero_injection_is_identity(self):
        bb = self._bb()
        z = generator(2, "z").normal(size=(6, 2)).astype(np.float32)
        plain = B.backbone_forward(bb, z, 5, B.TextCondition(0))
        inj = B.InjectionBundle(
            input_injection=np.zeros((6, 2), dtype=np.float32),
            block_injections=[np.zeros((6, 4), dtype=np.float32)],
        )
        with_zero = B.backbone_forward(bb, z, 5, B.TextCondition(0), inj)
        assert np.array_equal(plain.data, with_zero.data)

    def test_forward_is_deterministic(self):
        bb = self._bb()
        z = generator(3, "z").normal(size=(6, 2)).astype(np.float32)
        a = B.backbone_forward(bb, z, 7, B.TextCondition(2))
        b = B.backbone_forward(bb, z, 7, B.TextCondition(2))
        assert np.array_equal(a.data, b.data)

    def test_conditions_and_timesteps_matter(self):
        bb = self._bb()
        z = generator(4, "z").normal(size=(6, 2)).astype(np.float32)
        base = B.backbone_forward(bb, z, 7, B.TextCondition(0)).data
        other = B.backbone_forward(bb, z, 7, B.TextCondition(1)).data
        null = B.backbone_forward(bb, z, 7, B.NULL_CONDITION).data
        later = B.backbone_forward(bb, z, 500, B.TextCondition(0)).data
        assert not np.array_equal(base, other)
        assert not np.array_equal(base, null)
        assert not np.array_equal(base, later)

    def test_batched_matches_single(self):
        bb = self._bb()
        zb = generator(5, "z").normal(size=(4, 6, 2)).astype(np.float32)
        ts = np.array([3, 9, 100, 700])
        ids = np.array([0, 1, 2, 3])
        out = B.backbone_forward(bb, zb, ts, ids).data
        for i in range(4):
            single = B.backbone_forward(
                bb, zb[i], int(ts[i]), int(ids[i])).data
            assert np.allclose(out[i], single, atol=1e-6)

    def test_bad_shapes_rejected(self):
        bb = self._bb()
        with pytest.raises(DimensionError):
            B.backbone_forward(bb, np.zeros((5, 2)), 0, B.TextCondition(0))
        with pytest.raises(DimensionError):
            B.backbone_forward(
                bb, np.zeros((6, 2)), 0, B.TextCondition(0),
                B.InjectionBundle(input_injection=np.zeros((6, 4))))
        with pytest.raises(DimensionError):
            B.backbone_forward(
                bb, np.zeros((6, 2)), 0, B.TextCondition(0),
                B.InjectionBundle(block_injections=[np.zeros((6, 4))] * 2))

    def test_full_forward_gradcheck(self):
        bb = self._bb(seed=11)
        params = [p for _, p in bb.parameters()]
        for p in params:
            p.data = p.data.astype(np.float64)
        z = nn.Tensor(generator(6, "z").normal(size=(6, 2)))
        target = generator(7, "z").normal(size=(6, 2))

        def build_loss():
            out = B.backbone_forward(bb, z, 13, B.TextCondition(1))
            return nn.mse(out, nn.Tensor(target))

        assert nn.finite_diff_check(build_loss, params) < 1e-4


class TestFingerprint:
    def test_stable_and_sensitive(self):
        bb = B.init_backbone(TINY, 21)
        before = B.fingerprint(bb)
        assert before == B.fingerprint(bb)
        keep = float(bb.blocks[0].ada.w.data[0, 0])
        bb.blocks[0].ada.w.data[0, 0] = keep + 1e-3
        assert B.fingerprint(bb) != before
        bb.blocks[0].ada.w.data[0, 0] = keep
        assert B.fingerprint(bb) == before

    def test_same_seed_same_fingerprint(self):
        assert B.fingerprint(B.init_backbone(TINY, 33)) == \
            B.fingerprint(B.init_backbone(TINY, 33))
