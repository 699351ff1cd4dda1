import numpy as np
import pytest

from uniseg import clipdriver as cd
from uniseg import errors, nnops
from uniseg.phantom import toy_taxonomy

from conftest import check_grads_fd, finite_difference, rel_error


class TestEmbeddingStore:
    def test_one_hot_is_identity(self):
        tax = toy_taxonomy(3, (1,))
        store = cd.one_hot_store(tax)
        assert store.dim == 4
        eye = np.stack([store.get(c) for c in tax.indices()])
        assert (eye == np.eye(4)).all()

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        store = cd.EmbeddingStore({1: rng.normal(size=4), 2: rng.normal(size=4),
                                   7: rng.normal(size=4)}, 4, source="fixture")
        p = tmp_path / "e.uemb"
        cd.save_embeddings(p, store)
        back = cd.load_embeddings(p)
        assert back.dim == 4 and back.source == "fixture" and len(back) == 3
        for cls in (1, 2, 7):
            assert np.allclose(back.get(cls), store.get(cls), atol=1e-8)

    def test_fixture_file(self, tmp_path):
        p = tmp_path / "f.uemb"
        p.write_text("UEMB1 4 test\n1 0 0 0 1\n2 0 1 0 0\n3 1 0 0 0\n")
        store = cd.load_embeddings(p)
        assert len(store) == 3 and store.dim == 4

    def test_length_mismatch(self, tmp_path):
        p = tmp_path / "g.uemb"
        p.write_text("UEMB1 4 test\n1 0 0 0\n")
        with pytest.raises(errors.EmbeddingDimMismatch):
            cd.load_embeddings(p)

    def test_duplicate_class_last_write_wins(self, tmp_path):
        p = tmp_path / "h.uemb"
        p.write_text("UEMB1 2 t\n1 1 0\n1 0 1\n")
        with pytest.warns(UserWarning, match="duplicate"):
            store = cd.load_embeddings(p)
        assert len(store) == 1
        assert (store.get(1) == np.array([0.0, 1.0])).all()

    def test_missing_class_at_use(self):
        store = cd.EmbeddingStore({1: np.zeros(2)}, 2)
        with pytest.raises(errors.MissingEmbedding):
            store.get(5)

    def test_structured_shares_root_block(self):
        tax = toy_taxonomy(2, (1,))  # 3 = tumor of organ a
        store = cd.structured_store(tax)
        liverish, tumor, other = store.get(1), store.get(3), store.get(2)
        def cos(a, b):
            return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert cos(liverish, tumor) > cos(liverish, other)


class TestGenerateParams:
    def test_zero_weights_gives_bias(self):
        lpg = cd.LpgMap(np.zeros((cd.head_param_count(4), 6)),
                        np.arange(cd.head_param_count(4), dtype=np.float64))
        head, theta, _ = cd.generate_params(1, np.ones(4), np.ones(2), lpg, 4)
        assert (theta == lpg.bias).all()

    def test_identity_block_copies_prefix(self):
        n = cd.head_param_count(4)
        w = np.zeros((n, n))
        np.fill_diagonal(w, 1.0)
        lpg = cd.LpgMap(w, np.zeros(n))
        u = np.arange(n, dtype=np.float64)
        head, theta, _ = cd.generate_params(1, u[:n - 2], u[n - 2:], lpg, 4)
        assert (theta == u).all()

    def test_random_map_matches_matvec_oracle(self):
        rng = np.random.default_rng(1)
        n = cd.head_param_count(4)
        lpg = cd.LpgMap(rng.normal(size=(n, 7)), rng.normal(size=n))
        w_cls, f = rng.normal(size=3), rng.normal(size=4)
        _, theta, _ = cd.generate_params(1, w_cls, f, lpg, 4)
        u = np.concatenate([w_cls, f])
        ref = np.zeros(n)  # naive mat-vec oracle
        for i in range(n):
            acc = lpg.bias[i]
            for j in range(7):
                acc += lpg.weight[i, j] * u[j]
            ref[i] = acc
        assert np.abs(theta - ref).max() < 1e-6

    def test_dim_mismatch(self):
        lpg = cd.LpgMap(np.zeros((cd.head_param_count(4), 6)), np.zeros(cd.head_param_count(4)))
        with pytest.raises(errors.LpgDimMismatch):
            cd.generate_params(1, np.zeros(3), np.zeros(5), lpg, 4)

    def test_param_count_layout(self):
        # 8*C_dec + 8 + 72 + 9
        assert cd.head_param_count(8) == 153
        assert cd.head_param_count(4) == 8 * 4 + 8 + 72 + 9
        head = cd.HeadParams.from_flat(np.arange(153, dtype=np.float64), 8)
        assert head.w1.shape == (8, 8) and head.w3.shape == (1, 8)
        assert (head.to_flat() == np.arange(153)).all()


class TestHeadForward:
    def test_zero_head_is_half(self):
        zero = cd.HeadParams.from_flat(np.zeros(cd.head_param_count(4)), 4)
        p, _ = cd.head_forward(np.random.default_rng(2).normal(size=(4, 2, 2, 2)), zero)
        assert (p == 0.5).all()

    def test_saturated_bias(self):
        theta = np.zeros(cd.head_param_count(4))
        theta[-1] = 10.0  # third-layer bias
        head = cd.HeadParams.from_flat(theta, 4)
        p, _ = cd.head_forward(np.zeros((4, 2, 2, 2)), head)
        assert (np.abs(p - 1.0) < 1e-4).all()

    def test_matches_per_voxel_mlp_oracle(self):
        rng = np.random.default_rng(3)
        head = cd.HeadParams.from_flat(rng.normal(size=cd.head_param_count(4)), 4)
        fd = rng.normal(size=(4, 2, 2, 2))
        p, _ = cd.head_forward(fd, head)

        def leaky(v):
            return np.where(v > 0, v, 0.01 * v)

        for z in range(2):
            for y in range(2):
                for x in range(2):
                    v = fd[:, z, y, x]
                    a1 = leaky(head.w1 @ v + head.b1)
                    a2 = leaky(head.w2 @ a1 + head.b2)
                    z3 = head.w3 @ a2 + head.b3
                    ref = 1.0 / (1.0 + np.exp(-z3[0]))
                    assert abs(p[z, y, x] - ref) < 1e-6

    def test_values_in_open_unit_interval(self):
        rng = np.random.default_rng(4)
        head = cd.HeadParams.from_flat(rng.normal(size=cd.head_param_count(4)), 4)
        p, _ = cd.head_forward(rng.normal(size=(4, 3, 3, 3)), head)
        assert (p > 0).all() and (p < 1).all()

    def test_multi_label_same_voxel(self):
        """Two saturating heads can both claim a voxel (sigmoid, not softmax)."""
        theta = np.zeros(cd.head_param_count(4))
        theta[-1] = 8.0
        head_a = cd.HeadParams.from_flat(theta, 4)
        head_b = cd.HeadParams.from_flat(theta.copy(), 4)
        fd = np.zeros((4, 2, 2, 2))
        pa, _ = cd.head_forward(fd, head_a)
        pb, _ = cd.head_forward(fd, head_b)
        assert (pa > 0.5).all() and (pb > 0.5).all()


class TestHeadBackward:
    def test_zero_upstream_gives_zero(self):
        rng = np.random.default_rng(5)
        head = cd.HeadParams.from_flat(rng.normal(size=cd.head_param_count(4)), 4)
        fd = rng.normal(size=(4, 2, 2, 2))
        p, tape = cd.head_forward(fd, head)
        g_theta, g_fd = cd.head_backward(tape, head, np.zeros_like(p))
        assert (g_theta == 0).all() and (g_fd == 0).all()

    def test_theta_grads_match_fd(self):
        rng = np.random.default_rng(6)
        theta = rng.normal(size=cd.head_param_count(4))
        fd = rng.normal(size=(4, 2, 2, 2))
        c = rng.normal(size=(2, 2, 2))

        def loss():
            head = cd.HeadParams.from_flat(theta, 4)
            p, _ = cd.head_forward(fd, head)
            return float((c * p).sum())

        head = cd.HeadParams.from_flat(theta, 4)
        p, tape = cd.head_forward(fd, head)
        g_theta, g_fd = cd.head_backward(tape, head, c)
        check_grads_fd(loss, {"theta": theta, "fd": fd},
                       {"theta": g_theta, "fd": g_fd}, rng)

    def test_chain_through_lpg_matches_fd(self):
        """d loss / d lpg.weight via composed adjoints equals end-to-end FD."""
        rng = np.random.default_rng(7)
        n = cd.head_param_count(4)
        lpg = cd.LpgMap(rng.normal(size=(n, 5)) * 0.3, rng.normal(size=n) * 0.3)
        w_cls, f = rng.normal(size=3), rng.normal(size=2)
        fd = rng.normal(size=(4, 2, 2, 2))
        c = rng.normal(size=(2, 2, 2))

        def loss():
            head, _, _ = cd.generate_params(1, w_cls, f, lpg, 4)
            p, _ = cd.head_forward(fd, head)
            return float((c * p).sum())

        head, theta, u = cd.generate_params(1, w_cls, f, lpg, 4)
        p, tape = cd.head_forward(fd, head)
        g_theta, _ = cd.head_backward(tape, head, c)
        gw, gb, g_f = cd.lpg_backward(g_theta, u, lpg, d_text=3)
        check_grads_fd(loss, {"W": lpg.weight, "b": lpg.bias},
                       {"W": gw, "b": gb}, rng, probes=12)
        for _ in range(6):
            idx = (int(rng.integers(2)),)
            fdv = finite_difference(loss, f, idx)
            assert rel_error(float(g_f[idx]), fdv) < 1e-4


class TestPerClassIndependence:
    def test_perturbing_one_map_leaves_others_bit_identical(self, tiny_model):
        from uniseg.model import forward_sample
        rng = np.random.default_rng(8)
        x = rng.normal(size=(8, 8, 8))
        before, _ = forward_sample(tiny_model, x)
        tiny_model.lpg[1].weight += 0.5  # perturb class 1 only
        after, _ = forward_sample(tiny_model, x)
        assert not (before[1] == after[1]).all()
        assert (before[2] == after[2]).all()
        assert (before[3] == after[3]).all()
