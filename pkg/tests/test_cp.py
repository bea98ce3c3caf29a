import numpy as np
import pytest

from lesionforge.cp import (
    CpModel,
    cp_als,
    khatri_rao,
    load_model,
    pinv_psd,
    project_test,
    rank_clusters_report,
    save_model,
    stack_images,
    unfold1,
    unfold2,
    unfold3,
    unstack_images,
)


def random_low_rank(shape, rank, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((shape[0], rank))
    b = rng.standard_normal((shape[1], rank))
    c = rng.standard_normal((shape[2], rank))
    return np.einsum("ir,jr,kr->ijk", a, b, c), (a, b, c)


class TestStacking:
    def test_layout(self):
        img = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3)
        t = stack_images([img])
        assert t.shape == (1, 2, 9)
        # red plane, then green, then blue, side by side
        np.testing.assert_array_equal(t[0, :, :3], img[:, :, 0])
        np.testing.assert_array_equal(t[0, :, 3:6], img[:, :, 1])
        np.testing.assert_array_equal(t[0, :, 6:], img[:, :, 2])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        imgs = [rng.random((4, 5, 3)) for _ in range(6)]
        back = unstack_images(stack_images(imgs))
        np.testing.assert_array_equal(back, np.stack(imgs))

    def test_mixed_shapes_rejected(self):
        with pytest.raises(ValueError):
            stack_images([np.zeros((4, 4, 3)), np.zeros((4, 5, 3))])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stack_images([])


class TestUnfoldings:
    def test_2x2x2_pinned_layout(self):
        # x[i1, i2, i3] = 100*i1 + 10*i2 + i3
        x = np.array([[[0, 1], [10, 11]], [[100, 101], [110, 111]]], dtype=float)
        np.testing.assert_array_equal(
            unfold1(x), [[0, 10, 1, 11], [100, 110, 101, 111]]
        )
        # columns run i1-fastest in every unfolding
        np.testing.assert_array_equal(
            unfold2(x), [[0, 100, 1, 101], [10, 110, 11, 111]]
        )
        np.testing.assert_array_equal(
            unfold3(x), [[0, 100, 10, 110], [1, 101, 11, 111]]
        )

    def test_element_map_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.random((3, 4, 5))
        u1, u2, u3 = unfold1(x), unfold2(x), unfold3(x)
        for i1 in range(3):
            for i2 in range(4):
                for i3 in range(5):
                    assert u1[i1, i3 * 4 + i2] == x[i1, i2, i3]
                    assert u2[i2, i3 * 3 + i1] == x[i1, i2, i3]
                    assert u3[i3, i2 * 3 + i1] == x[i1, i2, i3]


class TestKhatriRao:
    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        u = rng.random((4, 3))
        v = rng.random((5, 3))
        kr = khatri_rao(u, v)
        assert kr.shape == (20, 3)
        for i in range(4):
            for j in range(5):
                np.testing.assert_allclose(kr[i * 5 + j], u[i] * v[j], atol=1e-15)

    def test_reconstruction_identity(self):
        x, (a, b, c) = random_low_rank((3, 4, 5), 2, seed=3)
        np.testing.assert_allclose(unfold1(x), a @ khatri_rao(c, b).T, atol=1e-12)

    def test_rank_mismatch(self):
        with pytest.raises(ValueError):
            khatri_rao(np.zeros((3, 2)), np.zeros((4, 3)))


class TestPinvPsd:
    def test_full_rank_inverse(self):
        rng = np.random.default_rng(4)
        m = rng.standard_normal((5, 5))
        g = m @ m.T + np.eye(5)
        np.testing.assert_allclose(pinv_psd(g) @ g, np.eye(5), atol=1e-10)

    def test_rank_deficient_matches_numpy(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((6, 3))
        g = m @ m.T  # rank 3
        np.testing.assert_allclose(pinv_psd(g), np.linalg.pinv(g), atol=1e-10)


class TestCpAls:
    @pytest.mark.parametrize("seed", range(10))
    def test_exact_recovery_rank3(self, seed):
        x, _ = random_low_rank((30, 32, 48), 3, seed=seed)
        model = cp_als(x, rank=3, seed=seed)
        assert model.fit >= 0.999

    def test_reconstruction_from_factors(self):
        x, _ = random_low_rank((8, 9, 10), 2, seed=20)
        model = cp_als(x, rank=2, seed=0)
        recon = model.a @ khatri_rao(model.c, model.b).T
        assert np.linalg.norm(unfold1(x) - recon) <= 1e-3 * np.linalg.norm(x)

    def test_canonical_basis_norms_and_signs(self):
        x, _ = random_low_rank((6, 7, 8), 2, seed=21)
        model = cp_als(x, rank=2, seed=0)
        for f in (model.b, model.c):
            np.testing.assert_allclose(np.linalg.norm(f, axis=0), 1.0, atol=1e-10)
            peaks = f[np.abs(f).argmax(axis=0), np.arange(f.shape[1])]
            assert (peaks > 0).all()

    def test_fit_trace_roughly_monotone(self):
        x, _ = random_low_rank((10, 11, 12), 3, seed=22)
        model = cp_als(x, rank=3, seed=0)
        trace = np.array(model.fit_trace)
        assert (np.diff(trace) >= -1e-8).all()

    def test_determinism(self):
        x, _ = random_low_rank((7, 8, 9), 2, seed=23)
        m1 = cp_als(x, rank=2, seed=11)
        m2 = cp_als(x.copy(), rank=2, seed=11)
        np.testing.assert_array_equal(m1.a, m2.a)
        np.testing.assert_array_equal(m1.b, m2.b)
        np.testing.assert_array_equal(m1.c, m2.c)

    def test_rank_one_constant_tensor(self):
        x = np.full((4, 5, 6), 2.0)
        model = cp_als(x, rank=1, seed=0)
        assert model.fit >= 0.999

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            cp_als(np.zeros((3, 3)), rank=1)
        with pytest.raises(ValueError):
            cp_als(np.zeros((3, 3, 3)), rank=1)  # zero tensor
        with pytest.raises(ValueError):
            cp_als(np.ones((2, 2, 2)), rank=0)


class TestProjectTest:
    def test_matches_per_row_lstsq_oracle(self):
        x, _ = random_low_rank((12, 9, 10), 3, seed=30)
        model = cp_als(x[:8], rank=3, seed=0)
        got = project_test(x[8:], model)
        f = khatri_rao(model.c, model.b)
        for i, row in enumerate(unfold1(x[8:])):
            want, *_ = np.linalg.lstsq(f, row, rcond=None)
            np.testing.assert_allclose(got[i], want, atol=1e-8)

    def test_training_slabs_recover_a(self):
        x, _ = random_low_rank((10, 8, 9), 2, seed=31)
        model = cp_als(x, rank=2, seed=0)
        np.testing.assert_allclose(project_test(x, model), model.a, atol=1e-6)

    def test_low_rank_heldout_exact(self):
        x, _ = random_low_rank((15, 8, 9), 3, seed=32)
        model = cp_als(x[:10], rank=3, seed=0, fit_tol=1e-12, max_sweeps=500)
        proj = project_test(x[10:], model)
        recon = proj @ khatri_rao(model.c, model.b).T
        assert np.linalg.norm(unfold1(x[10:]) - recon) <= 1e-6 * np.linalg.norm(x[10:])

    def test_shape_mismatch(self):
        x, _ = random_low_rank((6, 7, 8), 2, seed=33)
        model = cp_als(x, rank=2, seed=0)
        with pytest.raises(ValueError):
            project_test(np.zeros((2, 7, 9)), model)


class TestRankClustersReport:
    def test_planted_informative_component(self):
        rng = np.random.default_rng(40)
        labels = np.array([0] * 20 + [1] * 20)
        a = rng.standard_normal((40, 5))
        a[:, 2] += 5.0 * labels  # component 2 separates the classes
        report = rank_clusters_report(a, labels, top_k=3)
        assert report["top_components"][0]["component"] == 2
        assert report["constant_components"] == []

    def test_constant_column_skipped(self):
        rng = np.random.default_rng(41)
        labels = np.array([0, 0, 1, 1])
        a = rng.standard_normal((4, 3))
        a[:, 1] = 7.0
        report = rank_clusters_report(a, labels, top_k=3)
        assert report["constant_components"] == [1]
        assert all(t["component"] != 1 for t in report["top_components"])

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            rank_clusters_report(np.ones((3, 2)), np.zeros(3))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        x, _ = random_low_rank((6, 7, 8), 2, seed=50)
        model = cp_als(x, rank=2, seed=0)
        path = tmp_path / "model.npz"
        save_model(model, path)
        back = load_model(path)
        np.testing.assert_array_equal(back.a, model.a)
        np.testing.assert_array_equal(back.b, model.b)
        np.testing.assert_array_equal(back.c, model.c)
        assert back.fit_trace == model.fit_trace
        assert back.rank == model.rank
