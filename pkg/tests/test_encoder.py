"""Encoder tests: shape contracts, zero-init FPN heads, translation
covariance, ladder gradient isolation, checkpoint round-trip."""

import numpy as np
import pytest
import torch

from cascadematch.attention import AttentionConfig
from cascadematch.checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from cascadematch.encoder import (
    EncoderError,
    FeaturePyramid,
    LadderEncoder,
    PyramidEncoder,
)
from cascadematch.texture import TextureField

SMALL = (8, 12, 16)


def _texture_image(seed, h, w, y0=0):
    tex = TextureField(seed, extent=max(h + y0, w))
    ys, xs = np.meshgrid(np.arange(h) + y0 + 0.5, np.arange(w) + 0.5,
                         indexing="ij")
    return tex(xs, ys).astype(np.float32)


class TestEncodeShapes:
    def test_toy_channel_table(self):
        torch.manual_seed(0)
        pyr = PyramidEncoder((32, 64, 96))(torch.zeros(64, 64))
        assert tuple(pyr.maps[2].shape) == (32, 32, 32)
        assert tuple(pyr.maps[4].shape) == (16, 16, 64)
        assert tuple(pyr.maps[8].shape) == (8, 8, 96)
        assert pyr.channels == {2: 32, 4: 64, 8: 96}

    def test_configured_channel_table(self):
        torch.manual_seed(0)
        pyr = PyramidEncoder(SMALL)(torch.zeros(32, 48))
        assert tuple(pyr.maps[8].shape) == (4, 6, 16)
        assert tuple(pyr.maps[2].shape) == (16, 24, 8)

    def test_rejects_non_multiple_of_eight(self):
        with pytest.raises(EncoderError):
            PyramidEncoder(SMALL)(torch.zeros(60, 64))

    def test_sixteenth_scale_optional(self):
        torch.manual_seed(0)
        enc = PyramidEncoder(SMALL, include_sixteenth=True)
        pyr = enc(torch.zeros(64, 64))
        assert tuple(pyr.maps[16].shape) == (4, 4, 16)
        assert tuple(pyr.maps[8].shape) == (8, 8, 16)
        with pytest.raises(EncoderError):
            enc(torch.zeros(72, 72))  # divides 8 but not 16

    def test_accepts_numpy_rejects_3d(self):
        torch.manual_seed(0)
        enc = PyramidEncoder(SMALL)
        enc(np.zeros((32, 32), dtype=np.float64))
        with pytest.raises(EncoderError):
            enc(torch.zeros(1, 32, 32))


class TestEncodeBehavior:
    def test_zero_image_zero_final_layers_gives_zero_maps(self):
        torch.manual_seed(1)
        enc = PyramidEncoder(SMALL)
        enc.zero_output_layers()
        pyr = enc(torch.zeros(64, 64))
        for s in (8, 4, 2):
            assert torch.equal(pyr.maps[s], torch.zeros_like(pyr.maps[s]))

    def test_identical_inputs_bitwise_identical_pyramids(self):
        torch.manual_seed(2)
        enc = PyramidEncoder(SMALL)
        img = torch.from_numpy(_texture_image(5, 64, 64))
        p1, p2 = enc(img), enc(img.clone())
        for s in (8, 4, 2):
            assert torch.equal(p1.maps[s], p2.maps[s])

    def test_translation_covariance_eight_px_shift(self):
        torch.manual_seed(3)
        enc = PyramidEncoder(SMALL)
        field = _texture_image(7, 328, 320)
        a = torch.from_numpy(field[:320])
        b = torch.from_numpy(field[8:])
        with torch.no_grad():
            ma = enc(a).maps[8]
            mb = enc(b).maps[8]
        # content of b sits 8 px higher: row r of b equals row r+1 of a at 1/8
        inner = (mb[9:29, 10:30] - ma[10:30, 10:30]).abs().max()
        assert float(inner) < 1e-5
        unshifted = (ma[9:29, 10:30] - ma[10:30, 10:30]).abs().max()
        assert float(unshifted) > 1e-3  # the check has teeth

    def test_coarse_attention_hook(self):
        torch.manual_seed(4)
        cfg = AttentionConfig(variant="linear", dim=16, heads=4)
        enc = PyramidEncoder(SMALL, coarse_attention=cfg)
        pyr = enc(torch.from_numpy(_texture_image(9, 64, 64)))
        assert tuple(pyr.maps[8].shape) == (8, 8, 16)


class TestLadder:
    def _frozen(self, seed=0):
        torch.manual_seed(seed)
        enc = PyramidEncoder(SMALL)
        with torch.no_grad():
            return enc, enc(torch.from_numpy(_texture_image(11, 64, 64)))

    def test_output_dims_match_frozen(self):
        _, pyr = self._frozen()
        torch.manual_seed(1)
        out = LadderEncoder(SMALL)(pyr)
        assert out.maps[4].shape == pyr.maps[4].shape
        assert out.maps[2].shape == pyr.maps[2].shape
        assert 8 not in out.maps

    def test_missing_scale_errors(self):
        _, pyr = self._frozen()
        torch.manual_seed(1)
        ladder = LadderEncoder(SMALL)
        with pytest.raises(EncoderError):
            ladder(FeaturePyramid({8: pyr.maps[8], 4: pyr.maps[4]}))

    def test_gradients_reach_only_ladder_parameters(self):
        torch.manual_seed(5)
        enc = PyramidEncoder(SMALL)
        ladder = LadderEncoder(SMALL)
        pyr = enc(torch.from_numpy(_texture_image(13, 64, 64)))
        out = ladder(pyr)
        (out.maps[4].square().sum() + out.maps[2].square().sum()).backward()
        assert all(p.grad is None for p in enc.parameters())
        assert all(p.grad is not None for p in ladder.parameters())

    def test_frozen_encoder_bitwise_unchanged_by_ladder_step(self):
        torch.manual_seed(6)
        enc = PyramidEncoder(SMALL)
        ladder = LadderEncoder(SMALL)
        before = {k: v.clone() for k, v in enc.state_dict().items()}
        opt = torch.optim.Adam(ladder.parameters(), lr=1e-2)
        out = ladder(enc(torch.from_numpy(_texture_image(15, 64, 64))))
        out.maps[2].square().sum().backward()
        opt.step()
        after = enc.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_ladder_gradient_matches_finite_differences(self):
        torch.manual_seed(7)
        ladder = LadderEncoder((4, 6, 8)).double()
        g = torch.Generator().manual_seed(8)
        pyr = FeaturePyramid({
            8: torch.randn(4, 4, 8, generator=g, dtype=torch.float64),
            4: torch.randn(8, 8, 6, generator=g, dtype=torch.float64),
            2: torch.randn(16, 16, 4, generator=g, dtype=torch.float64),
        })
        w4 = torch.randn(8, 8, 6, generator=g, dtype=torch.float64)
        w2 = torch.randn(16, 16, 4, generator=g, dtype=torch.float64)

        def loss():
            out = ladder(pyr)
            return (out.maps[4] * w4).sum() + (out.maps[2] * w2).sum()

        loss().backward()
        step = 1e-5
        for name, param in ladder.named_parameters():
            flat = param.detach().reshape(-1)
            grad = param.grad.reshape(-1)
            idx = int(torch.randint(flat.numel(), (1,), generator=g))
            with torch.no_grad():
                orig = float(flat[idx])
                flat[idx] = orig + step
                hi = float(loss())
                flat[idx] = orig - step
                lo = float(loss())
                flat[idx] = orig
            fd = (hi - lo) / (2 * step)
            ref = max(abs(fd), abs(float(grad[idx])), 1e-8)
            assert abs(fd - float(grad[idx])) / ref < 1e-4, name


class TestCheckpoint:
    def test_roundtrip_preserves_outputs(self, tmp_path):
        torch.manual_seed(9)
        enc = PyramidEncoder(SMALL)
        img = torch.from_numpy(_texture_image(17, 64, 64))
        with torch.no_grad():
            want = enc(img).maps[8]
        save_checkpoint(tmp_path / "ck", enc, {"channels": list(SMALL)})

        torch.manual_seed(10)
        fresh = PyramidEncoder(SMALL)
        manifest = load_into(tmp_path / "ck", fresh)
        assert manifest["channels"] == list(SMALL)
        with torch.no_grad():
            got = fresh(img).maps[8]
        assert torch.equal(want, got)

    def test_manifest_lists_arrays(self, tmp_path):
        torch.manual_seed(11)
        enc = PyramidEncoder(SMALL)
        save_checkpoint(tmp_path / "ck", enc)
        state, manifest = load_checkpoint(tmp_path / "ck")
        assert set(manifest["arrays"]) == set(state)
        assert manifest["arrays"]["lat3.weight"] == [16, 16, 1, 1]

    def test_missing_checkpoint_errors(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope")
