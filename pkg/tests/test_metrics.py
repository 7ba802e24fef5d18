import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from equikernel.metrics import retrieval_eval
from oracles import average_precision, retrieval_bruteforce


class TestRetrievalEval:
    def test_self_match(self):
        g = np.eye(4)
        m = retrieval_eval(g[:1], [0], g, [0, 1, 2, 3])
        assert (m.rank1, m.mAP, m.mINP) == (1.0, 1.0, 1.0)

    def test_ap_five_sixths(self):
        # matches at ranks 1 and 3 of 4
        gallery = np.array([[0.0], [1.0], [2.0], [3.0]])
        m = retrieval_eval(np.array([[0.0]]), ["a"], gallery, ["a", "b", "a", "c"])
        assert m.mAP == pytest.approx(5 / 6)
        assert average_precision([1, 0, 1, 0]) == pytest.approx(5 / 6)
        assert m.mINP == pytest.approx(2 / 3)

    def test_missing_identity_skipped_with_warning(self, caplog):
        gallery = np.array([[0.0], [1.0]])
        with caplog.at_level(logging.WARNING):
            m = retrieval_eval(np.array([[0.0], [5.0]]), [0, 9], gallery, [0, 1])
        assert m.evaluated == 1 and m.skipped == 1
        assert "skipped" in caplog.text

    def test_empty_gallery(self):
        with pytest.raises(ValueError, match="empty"):
            retrieval_eval(np.zeros((1, 2)), [0], np.zeros((0, 2)), [])

    def test_ties_go_to_lower_index(self):
        m = retrieval_eval(np.zeros((1, 1)), [1], np.zeros((2, 1)), [0, 1])
        assert m.rank1 == 0.0 and m.rank5 == 1.0

    @given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 8))
    def test_matches_bruteforce_and_bounds(self, seed, n_gallery, n_probe):
        rng = np.random.default_rng(seed)
        g, p = rng.normal(size=(n_gallery, 3)), rng.normal(size=(n_probe, 3))
        gl = rng.integers(0, 3, n_gallery)
        pl = rng.choice(gl, n_probe)
        m = retrieval_eval(p, pl, g, gl)
        np.testing.assert_allclose([m.rank1, m.rank5, m.mAP, m.mINP], retrieval_bruteforce(p, pl, g, gl),
                                   atol=1e-12)
        assert m.rank1 <= m.rank5
        assert all(0 <= v <= 1 for v in (m.rank1, m.rank5, m.mAP, m.mINP))

    @given(st.integers(0, 10_000))
    def test_gallery_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        g, p = rng.normal(size=(10, 4)), rng.normal(size=(5, 4))
        gl = rng.integers(0, 4, 10)
        pl = rng.choice(gl, 5)
        perm = rng.permutation(10)
        assert retrieval_eval(p, pl, g, gl) == retrieval_eval(p, pl, g[perm], gl[perm])
