"""Attention tests: oracle equivalences, candidate containment, masking.

The load-bearing checks compare restricted variants against the brute-force
global block with shared weights (LSA on one window, GSA at rate 1, full
candidate sets vs. unrestricted cross-attention) and validate candidate
builders against per-query Python set oracles.
"""

import math

import numpy as np
import pytest
import torch

from cascadematch.attention import (
    AttentionConfig,
    AttentionError,
    CandidateSet,
    CrossAttentionBlock,
    FullCrossAttentionBlock,
    SelfAttentionBlock,
    TokenGrid,
    TopkSelfAttention,
    build_candidates_lw,
    build_candidates_mt,
    positional_encode,
)

DIM, HEADS = 16, 4


def _grid(seed, hw, dim=DIM):
    g = torch.Generator().manual_seed(seed)
    return TokenGrid(torch.randn(hw[0] * hw[1], dim, generator=g), hw)


def _self_block(variant, seed=0, **kw):
    torch.manual_seed(seed)
    return SelfAttentionBlock(AttentionConfig(variant=variant, dim=DIM,
                                              heads=HEADS, **kw))


class TestPositionalEncode:
    def test_origin_cell_channel_values(self):
        enc = positional_encode(TokenGrid(torch.zeros(12, 8), (3, 4))).features
        assert torch.equal(enc[0, 0::4], torch.zeros(2))
        assert torch.equal(enc[0, 1::4], torch.ones(2))
        assert torch.equal(enc[0, 2::4], torch.zeros(2))
        assert torch.equal(enc[0, 3::4], torch.ones(2))

    def test_first_frequency_tracks_x(self):
        enc = positional_encode(TokenGrid(torch.zeros(12, 8), (3, 4))).features
        assert enc[1, 0].item() == pytest.approx(math.sin(1.0))
        assert enc[1, 2].item() == 0.0  # y unchanged along a row
        assert enc[4, 0].item() == 0.0  # x unchanged down a column
        assert enc[4, 2].item() == pytest.approx(math.sin(1.0))

    def test_additive_on_features(self):
        g = _grid(0, (3, 4), 8)
        enc = positional_encode(g).features
        base = positional_encode(TokenGrid(torch.zeros(12, 8), (3, 4))).features
        assert torch.allclose(enc, g.features + base)

    def test_infer_rescale_matches_train_grid_exactly(self):
        train = positional_encode(TokenGrid(torch.zeros(24, 8), (4, 6))).features
        test = positional_encode(TokenGrid(torch.zeros(96, 8), (8, 12)),
                                 mode="infer", train_hw=(4, 6)).features
        for i in range(4):
            for j in range(6):
                assert torch.equal(test[(2 * i) * 12 + 2 * j], train[i * 6 + j])

    def test_rejects_bad_channel_count(self):
        with pytest.raises(AttentionError):
            positional_encode(TokenGrid(torch.zeros(4, 6), (2, 2)))

    def test_infer_requires_train_size(self):
        with pytest.raises(AttentionError):
            positional_encode(TokenGrid(torch.zeros(4, 8), (2, 2)), mode="infer")


class TestOracleEquivalence:
    """Restricted variants vs. the brute-force global block, shared weights."""

    def _pair(self, variant, **kw):
        block = _self_block(variant, seed=3, **kw)
        ref = _self_block("global", seed=4)
        ref.load_state_dict(block.state_dict())
        return block, ref

    def test_lsa_single_window_matches_global(self):
        lsa, ref = self._pair("lsa", lsa_window=7)
        g = _grid(5, (7, 7))
        assert torch.allclose(lsa(g).features, ref(g).features, atol=1e-5)

    def test_lsa_padded_window_matches_global(self):
        # 5x6 grid < one 7x7 window: padding must be masked out exactly
        lsa, ref = self._pair("lsa", lsa_window=7)
        g = _grid(6, (5, 6))
        assert torch.allclose(lsa(g).features, ref(g).features, atol=1e-5)

    def test_gsa_rate_one_matches_global(self):
        gsa, ref = self._pair("gsa", gsa_rate=1)
        g = _grid(7, (6, 5))
        assert torch.allclose(gsa(g).features, ref(g).features, atol=1e-5)

    def test_full_candidate_cross_matches_full_cross(self):
        cfg = AttentionConfig(dim=DIM, heads=HEADS)
        torch.manual_seed(8)
        cand_block = CrossAttentionBlock(cfg)
        torch.manual_seed(9)
        full_block = FullCrossAttentionBlock(cfg)
        full_block.load_state_dict(cand_block.state_dict())
        qa, kb = _grid(10, (8, 8)), _grid(11, (8, 8))
        idx = torch.arange(64).expand(64, 64)
        cand = CandidateSet(idx, torch.ones(64, 64, dtype=torch.bool), (8, 8))
        assert torch.allclose(cand_block(qa, kb, cand).features,
                              full_block(qa, kb).features, atol=1e-5)


class TestMasking:
    def _setup(self):
        torch.manual_seed(21)
        block = CrossAttentionBlock(AttentionConfig(dim=DIM, heads=HEADS))
        q = _grid(22, (2, 2))
        k = _grid(23, (2, 3))
        idx = torch.tensor([[0, 1, 2], [3, 4, 2], [2, 2, 2], [0, 1, 3]])
        val = torch.tensor([[1, 1, 0], [1, 1, 0], [0, 0, 0], [1, 1, 1]],
                           dtype=torch.bool)
        return block, q, k, CandidateSet(idx, val, (2, 3))

    def test_invalid_candidate_is_bitwise_inert(self):
        # key cell 2 only ever appears with valid=False
        block, q, k, cand = self._setup()
        out1 = block(q, k, cand).features
        mutated = k.features.clone()
        mutated[2] = 1e6
        out2 = block(q, k.with_features(mutated), cand).features
        assert torch.equal(out1, out2)

    def test_valid_candidate_does_matter(self):
        block, q, k, cand = self._setup()
        out1 = block(q, k, cand).features
        mutated = k.features.clone()
        mutated[4] += 1.0
        out2 = block(q, k.with_features(mutated), cand).features
        assert not torch.equal(out1[1], out2[1])

    def test_empty_candidate_row_passes_through(self):
        block, q, k, cand = self._setup()
        out = block(q, k, cand).features
        assert torch.equal(out[2], q.features[2])
        assert not torch.equal(out[0], q.features[0])


class TestCandidatesLW:
    def test_window6_set_oracle(self):
        torch.manual_seed(31)
        ph, pw, w, up = 4, 5, 6, 2
        fh, fw = ph * up, pw * up
        parents = torch.randint(0, ph * pw, (9,))
        cand = build_candidates_lw(parents, (ph, pw), w, up)
        assert cand.k == 36 and cand.key_hw == (fh, fw)
        for qi, p in enumerate(parents.tolist()):
            cr, cc = (p // pw) * up, (p % pw) * up
            expect = {(r, c)
                      for r in range(cr - w // 2, cr - w // 2 + w)
                      for c in range(cc - w // 2, cc - w // 2 + w)
                      if 0 <= r < fh and 0 <= c < fw}
            got = {(int(i) // fw, int(i) % fw)
                   for i, v in zip(cand.indices[qi], cand.valid[qi]) if v}
            assert got == expect
            assert int(cand.valid[qi].sum()) == len(expect)

    def test_interior_parent_fully_valid(self):
        cand = build_candidates_lw(torch.tensor([5 * 10 + 5]), (10, 10), 6)
        assert bool(cand.valid.all())

    def test_window10_gives_k100(self):
        cand = build_candidates_lw(torch.tensor([0]), (4, 4), 10, expected_k=100)
        assert cand.k == 100

    def test_k_mismatch_raises(self):
        with pytest.raises(AttentionError):
            build_candidates_lw(torch.tensor([0]), (4, 4), 6, expected_k=99)


class TestCandidatesMT:
    def test_children_set_oracle(self):
        parents = torch.tensor([[0, 5], [11, 3]])
        cand = build_candidates_mt(parents, (3, 4))
        assert cand.k == 8 and cand.key_hw == (6, 8)

        def kids(p):
            r, c = (p // 4) * 2, (p % 4) * 2
            return {(r + dr) * 8 + (c + dc) for dr in (0, 1) for dc in (0, 1)}

        assert set(cand.indices[0].tolist()) == kids(0) | kids(5)
        assert set(cand.indices[1].tolist()) == kids(11) | kids(3)
        assert bool(cand.valid.all())

    def test_parent_validity_propagates_to_children(self):
        parents = torch.tensor([[0, 5]])
        valid = torch.tensor([[True, False]])
        cand = build_candidates_mt(parents, (3, 4), valid=valid)
        assert cand.valid[0].tolist() == [True] * 4 + [False] * 4

    def test_top32_gives_k128(self):
        parents = torch.arange(32)[None]
        cand = build_candidates_mt(parents, (8, 8), expected_k=128)
        assert cand.k == 128

    def test_k_mismatch_raises(self):
        with pytest.raises(AttentionError):
            build_candidates_mt(torch.tensor([[0, 5]]), (3, 4), expected_k=12)


class TestTopkSelection:
    def test_key_set_matches_cycle_oracle(self):
        torch.manual_seed(41)
        mixer = TopkSelfAttention(DIM, HEADS, topk=16)  # t = 4 at 2x upsample
        prob = torch.softmax(torch.randn(16, 16), dim=1)
        idx = mixer.candidate_indices((8, 8), prob, (4, 4), side="a")
        p = prob.numpy()
        for r in range(8):
            for c in range(8):
                parent = (r // 2) * 4 + (c // 2)
                j = int(p[parent].argmax())
                top = np.argsort(-p[:, j])[:4]
                expect = set()
                for cell in top:
                    tr, tc = (cell // 4) * 2, (cell % 4) * 2
                    expect |= {(tr + dr) * 8 + (tc + dc)
                               for dr in (0, 1) for dc in (0, 1)}
                assert set(idx[r * 8 + c].tolist()) == expect

    def test_side_b_transposes(self):
        torch.manual_seed(42)
        mixer = TopkSelfAttention(DIM, HEADS, topk=16)
        prob = torch.softmax(torch.randn(16, 16), dim=1)
        b = mixer.candidate_indices((8, 8), prob, (4, 4), side="b")
        a_of_t = mixer.candidate_indices((8, 8), prob.T.contiguous(), (4, 4), side="a")
        assert torch.equal(b, a_of_t)

    def test_requires_coarse_probabilities(self):
        block = _self_block("topk")
        with pytest.raises(AttentionError):
            block(_grid(43, (8, 8)))

    def test_rejects_bad_divisibility(self):
        mixer = TopkSelfAttention(DIM, HEADS, topk=15)
        prob = torch.full((16, 16), 1 / 16.0)
        with pytest.raises(AttentionError):
            mixer.candidate_indices((8, 8), prob, (4, 4))


VARIANTS = ["linear", "lsa", "gsa", "topk", "lka", "pola", "global"]


@pytest.mark.parametrize("variant", VARIANTS)
def test_all_equal_tokens_stay_equal(variant):
    kw, extras = {}, {}
    if variant == "topk":
        kw["topk"] = 16
        extras = dict(coarse_prob=torch.full((16, 16), 1 / 16.0), coarse_hw=(4, 4))
    block = _self_block(variant, seed=51, **kw)
    token = torch.randn(1, DIM, generator=torch.Generator().manual_seed(52))
    out = block(TokenGrid(token.repeat(64, 1), (8, 8)), **extras).features.detach()
    assert float((out - out[0]).abs().max()) < 1e-6


@pytest.mark.parametrize("variant", VARIANTS)
def test_blocks_are_deterministic(variant):
    kw, extras = {}, {}
    if variant == "topk":
        kw["topk"] = 16
        extras = dict(coarse_prob=torch.softmax(torch.randn(
            16, 16, generator=torch.Generator().manual_seed(53)), 1),
            coarse_hw=(4, 4))
    block = _self_block(variant, seed=54, **kw)
    g = _grid(55, (8, 8))
    assert torch.equal(block(g, **extras).features, block(g, **extras).features)


class TestGradients:
    SMALL = dict(dim=8, heads=2, lsa_window=3, gsa_rate=2, topk=4,
                 pola_query=3, pola_key=5)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_self_blocks(self, variant):
        torch.manual_seed(61)
        block = SelfAttentionBlock(
            AttentionConfig(variant=variant, **self.SMALL)).double()
        extras = {}
        if variant == "topk":
            extras = dict(coarse_prob=torch.softmax(
                torch.randn(4, 4, dtype=torch.float64), 1), coarse_hw=(2, 2))
        x = torch.randn(16, 8, dtype=torch.float64, requires_grad=True)
        fn = lambda t: block(TokenGrid(t, (4, 4)), **extras).features
        assert torch.autograd.gradcheck(fn, (x,), eps=1e-6, atol=1e-4)

    def test_cross_block_with_masked_and_empty_rows(self):
        torch.manual_seed(62)
        block = CrossAttentionBlock(AttentionConfig(dim=8, heads=2)).double()
        idx = torch.tensor([[0, 1], [2, 3], [4, 5], [6, 7]])
        val = torch.tensor([[1, 1], [1, 0], [0, 0], [1, 1]], dtype=torch.bool)
        cand = CandidateSet(idx, val, (4, 4))
        xq = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
        xk = torch.randn(16, 8, dtype=torch.float64, requires_grad=True)
        fn = lambda a, b: block(TokenGrid(a, (2, 2)),
                                TokenGrid(b, (4, 4)), cand).features
        assert torch.autograd.gradcheck(fn, (xq, xk), eps=1e-6, atol=1e-4)

    def test_full_cross_linear_kernel(self):
        torch.manual_seed(63)
        block = FullCrossAttentionBlock(
            AttentionConfig(dim=8, heads=2), kernel="linear").double()
        xq = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
        xk = torch.randn(6, 8, dtype=torch.float64, requires_grad=True)
        fn = lambda a, b: block(TokenGrid(a, (2, 2)),
                                TokenGrid(b, (2, 3))).features
        assert torch.autograd.gradcheck(fn, (xq, xk), eps=1e-6, atol=1e-4)


class TestValidation:
    def test_token_count_must_match_grid(self):
        with pytest.raises(AttentionError):
            TokenGrid(torch.zeros(5, 8), (2, 3))

    def test_dim_divisible_by_heads(self):
        with pytest.raises(AttentionError):
            AttentionConfig(dim=10, heads=4)

    def test_unknown_variant(self):
        with pytest.raises(AttentionError):
            SelfAttentionBlock(AttentionConfig(variant="butterfly", dim=DIM))

    def test_unknown_cross_kernel(self):
        with pytest.raises(AttentionError):
            FullCrossAttentionBlock(AttentionConfig(dim=DIM), kernel="cosine")

    def test_pola_window_parity(self):
        with pytest.raises(AttentionError):
            SelfAttentionBlock(AttentionConfig(variant="pola", dim=DIM,
                                               pola_query=7, pola_key=20))

    def test_candidate_shape_mismatch(self):
        with pytest.raises(AttentionError):
            CandidateSet(torch.zeros(3, 4, dtype=torch.long),
                         torch.ones(3, 5, dtype=torch.bool), (4, 4))
