import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routeforge.similarity import (
    EXTERNAL_EMBEDDER,
    DistanceReport,
    PairwiseCache,
    PruneEntry,
    TokenizedCandidate,
    WsmdConfig,
    batch_kappa,
    fused_distance,
    kappa_from_costs,
    prune_set,
    smd,
    tokenize_and_embed,
    transport_plan,
    wmd,
    _raw_gw_cost,
)

CFG = WsmdConfig()

TEXTS = [
    "tier2.strategy_id=customer-kmeans\ntier2.target_size=80\n"
    "rationale=cluster customers by spatial proximity",
    "tier2.strategy_id=polar-sweep\ntier2.target_size=60\n"
    "tier2.start_angle=1.3\nrationale=sweep angular sectors around the depot",
    "tier2.strategy_id=kd-median\ntier2.target_size=40\n"
    "rationale=recursive median splits along the wider axis",
]


def synthetic_candidate(structure: np.ndarray, tag: str) -> TokenizedCandidate:
    n = structure.shape[0]
    emb = np.zeros((n, 64))
    emb[:, :n] = np.eye(n)
    return TokenizedCandidate(tokens=tuple(f"t{i}" for i in range(n)),
                              embeddings=emb, structure=structure,
                              fingerprint=f"synthetic-{tag}")


class TestTokenize:
    def test_deterministic(self):
        a = tokenize_and_embed(TEXTS[0], CFG)
        b = tokenize_and_embed(TEXTS[0], CFG)
        assert a.tokens == b.tokens
        assert np.array_equal(a.embeddings, b.embeddings)
        assert np.array_equal(a.structure, b.structure)
        assert a.fingerprint == b.fingerprint

    def test_single_token(self):
        c = tokenize_and_embed("solo", CFG)
        assert c.embeddings.shape == (1, 64)
        assert c.structure.tolist() == [[1.0]]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tokenize_and_embed("  \n ", CFG)

    def test_unit_norm_and_row_stochastic(self):
        c = tokenize_and_embed(TEXTS[1], CFG)
        assert np.allclose(np.linalg.norm(c.embeddings, axis=1), 1.0)
        assert np.allclose(c.structure.sum(axis=1), 1.0, atol=1e-9)

    def test_key_value_edges_present(self):
        flat = tokenize_and_embed("alpha beta gamma delta epsilon zeta", CFG)
        keyed = tokenize_and_embed("alpha=beta gamma delta epsilon zeta", CFG)
        assert not np.array_equal(flat.structure, keyed.structure)


class TestWmd:
    def test_self_distance(self):
        for text in TEXTS:
            c = tokenize_and_embed(text, CFG)
            assert wmd(c, c, CFG) <= 1e-6

    def test_single_token_pair(self):
        a = tokenize_and_embed("alpha", CFG)
        b = tokenize_and_embed("omega", CFG)
        want = float(np.linalg.norm(a.embeddings[0] - b.embeddings[0]))
        assert wmd(a, b, CFG) == pytest.approx(want, abs=1e-6)

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_two_token_permutation_oracle(self, seed):
        rng = np.random.default_rng(seed)

        def tok():
            return "".join(chr(97 + rng.integers(0, 26))
                           for _ in range(rng.integers(2, 9)))

        a = tokenize_and_embed(f"{tok()} {tok()}", CFG)
        b = tokenize_and_embed(f"{tok()} {tok()}", CFG)
        m = np.sqrt(np.maximum(2 - 2 * a.embeddings @ b.embeddings.T, 0))
        want = min(0.5 * (m[0, 0] + m[1, 1]), 0.5 * (m[0, 1] + m[1, 0]))
        assert wmd(a, b, CFG) == pytest.approx(want, abs=1e-3)

    def test_symmetry(self):
        a = tokenize_and_embed(TEXTS[0], CFG)
        b = tokenize_and_embed(TEXTS[1], CFG)
        assert abs(wmd(a, b, CFG) - wmd(b, a, CFG)) < 1e-9

    def test_marginal_feasibility(self):
        a = tokenize_and_embed("alpha beta gamma delta", CFG)
        b = tokenize_and_embed("epsilon zeta eta", CFG)
        plan = transport_plan(a, b, CFG)
        err = (np.abs(plan.sum(axis=1) - 0.25).max()
               + np.abs(plan.sum(axis=0) - 1 / 3).max())
        assert err < 1e-6


class TestSmd:
    def test_self_distance(self):
        for text in TEXTS:
            c = tokenize_and_embed(text, CFG)
            assert smd(c, c, CFG) <= 1e-6

    def test_one_by_one(self):
        a = synthetic_candidate(np.array([[1.0]]), "a1")
        b = synthetic_candidate(np.array([[1.0]]), "b1")
        assert smd(a, b, CFG) <= 1e-6

    @staticmethod
    def _grid_min(a1, a2):
        best = np.inf
        for t in np.linspace(0, 0.5, 201):
            plan = np.array([[t, 0.5 - t], [0.5 - t, t]])
            obj = sum((a1[i, k] - a2[j, l]) ** 2 * plan[i, j] * plan[k, l]
                      for i, j, k, l in itertools.product(range(2), repeat=4))
            best = min(best, obj)
        return best

    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_two_by_two_grid_oracle(self, seed):
        rng = np.random.default_rng(seed)

        def rs():
            a = rng.random((2, 2)) + 0.05
            return a / a.sum(axis=1, keepdims=True)

        a1, a2 = rs(), rs()
        raw_ab, _ = _raw_gw_cost(a1, a2, CFG)
        raw_aa, _ = _raw_gw_cost(a1, a1, CFG)
        raw_bb, _ = _raw_gw_cost(a2, a2, CFG)
        got = max(0.0, raw_ab - 0.5 * (raw_aa + raw_bb))
        assert got == pytest.approx(self._grid_min(a1, a2), abs=1e-2)

    def test_isomorphic_structures_close(self):
        a = np.array([[0.9, 0.1], [0.1, 0.9]])
        b = a[::-1][:, ::-1]   # relabeled copy
        ca = synthetic_candidate(a, "iso-a")
        cb = synthetic_candidate(b, "iso-b")
        assert smd(ca, cb, CFG) <= 1e-6

    def test_symmetry(self):
        a = tokenize_and_embed(TEXTS[0], CFG)
        b = tokenize_and_embed(TEXTS[1], CFG)
        assert abs(smd(a, b, CFG) - smd(b, a, CFG)) < 1e-9


class TestKappaAndFusion:
    def test_kappa_definition(self):
        assert kappa_from_costs([0.2], [0.1]) == pytest.approx(2.0)

    def test_kappa_degenerate(self):
        assert kappa_from_costs([0.0, 0.0], [0.0, 0.0]) == 1.0
        assert kappa_from_costs([], []) == 1.0

    def test_kappa_three_pair_hand_batch(self):
        wmds = [0.3, 0.6, 0.9]
        smds = [0.1, 0.2, 0.3]
        assert kappa_from_costs(wmds, smds) == pytest.approx(
            np.mean(wmds) / np.mean(smds))

    def test_fused_hand_arithmetic(self):
        a = tokenize_and_embed(TEXTS[0], CFG)
        b = tokenize_and_embed(TEXTS[1], CFG)
        cache = PairwiseCache()
        key = tuple(sorted((a.fingerprint, b.fingerprint)))
        cache._store[key] = (0.4, 0.1)
        report = fused_distance(a, b, kappa=2.0,
                                config=WsmdConfig(lam=0.5), cache=cache)
        assert report.fused == pytest.approx(0.3)

    def test_lambda_limits_exact(self):
        a = tokenize_and_embed(TEXTS[0], CFG)
        b = tokenize_and_embed(TEXTS[1], CFG)
        cache = PairwiseCache()
        k = batch_kappa([a, b], CFG, cache)
        r0 = fused_distance(a, b, k, WsmdConfig(lam=0.0), cache)
        r1 = fused_distance(a, b, k, WsmdConfig(lam=1.0), cache)
        assert r0.fused == r0.d_wmd
        assert r1.fused == k * r1.d_smd

    def test_fused_symmetry_and_selfdistance(self):
        cands = [tokenize_and_embed(t, CFG) for t in TEXTS]
        cache = PairwiseCache()
        k = batch_kappa(cands, CFG, cache)
        for a in cands:
            assert fused_distance(a, a, k, CFG, cache).fused <= 1e-6
        for a, b in itertools.combinations(cands, 2):
            ab = fused_distance(a, b, k, CFG, cache).fused
            ba = fused_distance(b, a, k, CFG, cache).fused
            assert abs(ab - ba) < 1e-9
            assert ab >= 0


class TestPruneSet:
    def _entries(self, texts, qs=None):
        qs = qs or [None] * len(texts)
        return [PruneEntry(candidate=tokenize_and_embed(t, CFG), q_value=q,
                           creation_index=i)
                for i, (t, q) in enumerate(zip(texts, qs))]

    def test_all_distant_all_retained(self):
        entries = self._entries(TEXTS)
        retained, pruned = prune_set(entries, epsilon=0.05, kappa=1.0,
                                     config=CFG)
        assert len(retained) == 3 and not pruned

    def test_exact_duplicate_earlier_kept(self):
        entries = self._entries([TEXTS[0], TEXTS[0]])
        retained, pruned = prune_set(entries, epsilon=0.5, kappa=1.0,
                                     config=CFG)
        assert len(retained) == 1
        assert retained[0].creation_index == 0
        assert pruned[0].loser.creation_index == 1

    def test_duplicate_higher_q_kept(self):
        entries = self._entries([TEXTS[0], TEXTS[0]], qs=[0.5, 0.7])
        retained, pruned = prune_set(entries, epsilon=0.5, kappa=1.0,
                                     config=CFG)
        assert len(retained) == 1
        assert retained[0].q_value == 0.7

    def test_evaluated_beats_unevaluated(self):
        entries = self._entries([TEXTS[0], TEXTS[0]], qs=[None, 0.2])
        retained, _ = prune_set(entries, epsilon=0.5, kappa=1.0, config=CFG)
        assert retained[0].q_value == 0.2

    def test_retained_set_soundness(self):
        texts = [TEXTS[i % 3] for i in range(7)]
        entries = self._entries(texts)
        cache = PairwiseCache()
        k = batch_kappa([e.candidate for e in entries], CFG, cache)
        retained, _ = prune_set(entries, epsilon=0.5, kappa=k, config=CFG,
                                cache=cache)
        for a, b in itertools.combinations(retained, 2):
            d = fused_distance(a.candidate, b.candidate, k, CFG, cache).fused
            assert d > 0.5


class TestExternalEmbedder:
    def test_injected_transport_used(self):
        def transport(payload):
            n = len(payload["texts"])
            return {"embeddings": [[float(i + 1), 0.0] for i in range(n)],
                    "dimension": 2}

        cfg = WsmdConfig(embedder=EXTERNAL_EMBEDDER,
                         embedder_url="http://embed.invalid")
        c = tokenize_and_embed("alpha beta", cfg, transport=transport)
        assert c.embeddings.shape == (2, 2)
        assert np.allclose(np.linalg.norm(c.embeddings, axis=1), 1.0)

    def test_failure_falls_back_with_warning(self, caplog):
        def transport(payload):
            raise ConnectionError("shut off")

        cfg = WsmdConfig(embedder=EXTERNAL_EMBEDDER,
                         embedder_url="http://embed.invalid")
        with caplog.at_level(logging.WARNING, logger="routeforge.similarity"):
            c = tokenize_and_embed("alpha beta", cfg, transport=transport)
        assert c.embeddings.shape == (2, 64)
        assert any("falling back" in r.message for r in caplog.records)


class TestConfigValidation:
    def test_bounds(self):
        with pytest.raises(ValueError):
            WsmdConfig(lam=1.5)
        with pytest.raises(ValueError):
            WsmdConfig(epsilon=-0.1)
        with pytest.raises(ValueError):
            WsmdConfig(ot_regularization=0.0)
