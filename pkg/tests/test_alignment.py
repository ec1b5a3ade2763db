import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sandwich.alignment import (
    AlignmentConfig, AlignmentConfigError, DeepSetBlock, EstimationError, GroupingError,
    KernelConfig, MMDProjection, SetBatch, aligned_flags, deepset_block, group_into_sets,
    mmd_projection, mmd_squared, rbf_bandwidth, sandwich_loss, set_partition, ungroup,
)
from sandwich.data import FeatureTensor, ShapeError

RBF = KernelConfig()
LINEAR = KernelConfig(kind="linear")


def oracle_mmd2(x, y, kind, rule="mean_sq_l2", fixed=None):
    """Brute-force V-statistic with explicit double sums (float64, no vectorisation)."""
    x = [np.asarray(r, dtype=np.float64).ravel() for r in x]
    y = [np.asarray(r, dtype=np.float64).ravel() for r in y]
    joint = x + y
    if kind == "rbf":
        if rule == "fixed":
            s2 = fixed
        else:
            acc, n = 0.0, 0
            for i, a in enumerate(joint):
                for j, b in enumerate(joint):
                    if i != j:
                        d = float(np.sum((a - b) ** 2))
                        acc += d if rule == "mean_sq_l2" else np.sqrt(d)
                        n += 1
            s2 = acc / n if rule == "mean_sq_l2" else (acc / n) ** 2
        k = lambda a, b: np.exp(-float(np.sum((a - b) ** 2)) / s2)
    else:
        k = lambda a, b: float(np.dot(a, b))

    def mean_k(p, q):
        return sum(k(a, b) for a in p for b in q) / (len(p) * len(q))

    return mean_k(x, x) + mean_k(y, y) - 2 * mean_k(x, y)


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


class TestMMD:
    def test_linear_worked_example(self):
        v = mmd_squared(t64([[0.0], [2.0]]), t64([[0.0], [0.0]]), LINEAR)
        assert float(v) == pytest.approx(1.0, abs=1e-12)
        assert oracle_mmd2([[0.0], [2.0]], [[0.0], [0.0]], "linear") == pytest.approx(1.0)

    @pytest.mark.parametrize("kernel", [RBF, LINEAR, KernelConfig(bandwidth_rule="mean_l2"),
                                        KernelConfig(bandwidth_rule="fixed", fixed_sigma2=3.0)])
    def test_oracle_8x5(self, kernel):
        rng = np.random.default_rng(3)
        x, y = rng.standard_normal((8, 5)), rng.standard_normal((8, 5)) + 0.5
        got = float(mmd_squared(t64(x), t64(y), kernel))
        want = oracle_mmd2(x, y, kernel.kind, kernel.bandwidth_rule, kernel.fixed_sigma2)
        assert got == pytest.approx(want, rel=1e-9)

    def test_identical_sets_zero(self):
        x = np.random.default_rng(0).standard_normal((6, 4))
        assert abs(float(mmd_squared(t64(x), t64(x), RBF))) < 1e-9

    def test_feature_tensor_input_flattened(self):
        rng = np.random.default_rng(1)
        a = FeatureTensor(rng.standard_normal((4, 2, 3)), "a", np.zeros(4))
        b = FeatureTensor(rng.standard_normal((5, 2, 3)), "b", np.zeros(5))
        got = float(mmd_squared(a, b, RBF))
        assert got == pytest.approx(oracle_mmd2(a.values, b.values, "rbf"), rel=1e-9)

    def test_errors(self):
        with pytest.raises(EstimationError):
            mmd_squared(t64(np.zeros((0, 3))), t64(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            mmd_squared(t64(np.ones((2, 3))), t64(np.ones((2, 4))))
        with pytest.raises(EstimationError):
            rbf_bandwidth(t64(np.ones((1, 3))), RBF)
        with pytest.raises(AlignmentConfigError):
            KernelConfig(bandwidth_rule="fixed")

    def test_bandwidth_not_differentiated(self):
        x = t64(np.random.default_rng(2).standard_normal((5, 3))).requires_grad_(True)
        assert not rbf_bandwidth(x, RBF).requires_grad

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**32 - 1),
           st.sampled_from(["rbf", "linear"]))
    def test_symmetric_nonnegative(self, n, m, d, seed, kind):
        rng = np.random.default_rng(seed)
        x, y = t64(rng.standard_normal((n, d))), t64(rng.standard_normal((m, d)) * 2)
        k = KernelConfig(kind=kind)
        if kind == "rbf" and n + m < 2:
            return
        a, b = float(mmd_squared(x, y, k)), float(mmd_squared(y, x, k))
        assert a >= -1e-9
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)

    def test_alignment_decreases_mmd(self):
        rng = np.random.default_rng(4)
        x = t64(rng.standard_normal((16, 4)) + 2.0).requires_grad_(True)
        y = t64(rng.standard_normal((16, 4)))
        opt = torch.optim.SGD([x], lr=0.5)
        start = float(mmd_squared(x, y))
        for _ in range(200):
            opt.zero_grad()
            loss = 1.0 * mmd_squared(x, y)
            loss.backward()
            opt.step()
        assert float(mmd_squared(x, y)) < start


def _feats(rng, n, d=6):
    return t64(rng.standard_normal((n, d)))


class TestSandwichLoss:
    cfg = AlignmentConfig()

    def test_lambda_zero_exact(self):
        rng = np.random.default_rng(0)
        lc = torch.tensor(0.7, dtype=torch.float64)
        res = sandwich_loss(lc, [_feats(rng, 6)], _feats(rng, 6), [[0, 1, 0, 1, -1, 0]],
                            [0, 1, 1, 0, 0, 1], AlignmentConfig(lambda_weight=0.0))
        assert res.total is lc

    def test_identical_features_zero_penalty(self):
        rng = np.random.default_rng(1)
        f = _feats(rng, 6)
        flags = [0, 1, 0, 1, 0, 1]
        lc = torch.tensor(1.25, dtype=torch.float64)
        res = sandwich_loss(lc, [f.clone()], f, [flags], flags, self.cfg)
        assert abs(float(res.total) - 1.25) < 1e-9

    def test_three_sources_six_terms(self):
        rng = np.random.default_rng(2)
        flags = [0, 1, 0, 1, 2, 0]
        res = sandwich_loss(torch.tensor(0.0, dtype=torch.float64), [_feats(rng, 6) for _ in range(3)],
                            _feats(rng, 6), [flags] * 3, flags, self.cfg)
        assert sorted(res.terms) == [(i, l) for i in range(3) for l in ("LH", "RH")]
        total = sum(float(v) for v in res.terms.values())
        assert float(res.total) == pytest.approx(total, rel=1e-12)

    def test_missing_label_contributes_zero(self):
        rng = np.random.default_rng(3)
        res = sandwich_loss(torch.tensor(0.0, dtype=torch.float64), [_feats(rng, 4)], _feats(rng, 4),
                            [[0, 0, 0, 0]], [0, 1, 0, 1], self.cfg)
        assert float(res.terms[(0, "RH")]) == 0.0 and float(res.terms[(0, "LH")]) > 0

    def test_negative_lambda(self):
        with pytest.raises(AlignmentConfigError):
            AlignmentConfig(lambda_weight=-1.0)

    def test_flags_by_name(self):
        np.testing.assert_array_equal(aligned_flags(["Rest", "LH", "RH", "Feet"], ("LH", "RH")),
                                      [-1, 0, 1, -1])

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(5)
        srcs = [_feats(rng, 6, 4).requires_grad_(True) for _ in range(2)]
        tgt = _feats(rng, 6, 4).requires_grad_(True)
        sf = [[0, 1, 0, 1, -1, 0], [1, 1, 0, 0, 1, -1]]
        tf = [0, 1, 1, 0, -1, 0]
        sandwich_loss(torch.zeros((), dtype=torch.float64), srcs, tgt, sf, tf, self.cfg).total.backward()

        def pairs():
            for s, fl in zip(srcs, sf):
                for k in (0, 1):
                    yield s[torch.as_tensor(np.asarray(fl) == k)], tgt[torch.as_tensor(np.asarray(tf) == k)]

        # the bandwidth is excluded from the gradient, so the numeric side pins it too
        with torch.no_grad():
            pinned = [float(rbf_bandwidth(torch.cat([a, b]), RBF)) for a, b in pairs()]

        def objective():
            return sum(float(mmd_squared(a, b, KernelConfig(bandwidth_rule="fixed", fixed_sigma2=s2)))
                       for (a, b), s2 in zip(pairs(), pinned))

        eps = 1e-6
        for p in srcs + [tgt]:
            for idx in np.ndindex(*p.shape):
                with torch.no_grad():
                    base = p[idx].item()
                    p[idx] = base + eps
                    hi = objective()
                    p[idx] = base - eps
                    lo = objective()
                    p[idx] = base
                num = (hi - lo) / (2 * eps)
                assert abs(num - p.grad[idx].item()) <= 1e-4 * max(abs(num), 1e-3)


class TestProjection:
    def test_width_and_determinism(self):
        torch.manual_seed(0)
        proj = MMDProjection(48)
        f = FeatureTensor(np.random.default_rng(0).standard_normal((3, 48, 7)).astype(np.float32), "b",
                          [0, 0, 1])
        a, b = mmd_projection(f, proj), mmd_projection(f, proj)
        assert a.values.shape == (3, 50, 7)
        np.testing.assert_array_equal(a.values, b.values)

    def test_zero_in_zero_out(self):
        proj = MMDProjection(10)
        for m in (proj.reduce, proj.mix):
            torch.nn.init.zeros_(m.bias)
        f = FeatureTensor(np.zeros((2, 10, 4), dtype=np.float32), "b", [0, 0])
        assert not np.any(mmd_projection(f, proj).values)


def deepset_oracle(x, block):
    """Straight-line loops over sets, trials, filters and positions."""
    w1, b1 = block.summary.weight.detach().double().numpy(), block.summary.bias.detach().double().numpy()
    w2, b2 = block.project.weight.detach().double().numpy(), block.project.bias.detach().double().numpy()
    s_, t_, n_, f_ = x.shape
    h_ = w1.shape[0]
    out = np.zeros_like(x, dtype=np.float64)
    for s in range(s_):
        mean = np.zeros((n_, f_))
        for t in range(t_):
            mean += x[s, t]
        mean /= t_
        summary = np.zeros((h_, f_))
        for h in range(h_):
            for j in range(f_):
                summary[h, j] = b1[h] + sum(w1[h, n] * mean[n, j] for n in range(n_))
        for t in range(t_):
            cat = np.concatenate([x[s, t], summary], axis=0)
            for n in range(n_):
                for j in range(f_):
                    v = b2[n] + sum(w2[n, k] * cat[k, j] for k in range(n_ + h_))
                    out[s, t, n, j] = v if v > 0 else np.expm1(v)
    return out


class TestDeepSet:
    def test_oracle(self):
        block = DeepSetBlock(4).double()
        rng = np.random.default_rng(0)
        with torch.no_grad():
            block.summary.weight.copy_(torch.as_tensor(rng.uniform(-1, 1, (8, 4))))
            block.summary.bias.copy_(torch.as_tensor(rng.uniform(-1, 1, 8)))
            block.project.weight.copy_(torch.as_tensor(rng.uniform(-0.5, 0.5, (4, 12))))
            block.project.bias.copy_(torch.as_tensor(rng.uniform(-1, 1, 4)))
        x = rng.standard_normal((2, 3, 4, 5))
        got = block(torch.as_tensor(x)).detach().numpy()
        np.testing.assert_allclose(got, deepset_oracle(x, block), rtol=1e-12, atol=1e-12)

    def test_single_trial_summary(self):
        block = DeepSetBlock(3).double()
        x = torch.as_tensor(np.random.default_rng(1).standard_normal((1, 1, 3, 2)))
        mean = x.mean(dim=1, keepdim=True)
        assert torch.equal(mean, x)
        np.testing.assert_allclose(block(x).detach().numpy(), deepset_oracle(x.numpy(), block), atol=1e-12)

    def test_shape_preserved(self):
        block = DeepSetBlock(48)
        assert block(torch.zeros(4, 10, 48, 7)).shape == (4, 10, 48, 7)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_equivariance(self, s, t, seed):
        torch.manual_seed(seed % 1000)
        block = DeepSetBlock(5)
        rng = np.random.default_rng(seed)
        x = torch.as_tensor(rng.standard_normal((s, t, 5, 3)).astype(np.float32))
        perm = np.stack([rng.permutation(t) for _ in range(s)])
        xp = torch.stack([x[i, perm[i]] for i in range(s)])
        with torch.no_grad():
            y, yp = block(x), block(xp)
        expected = torch.stack([y[i, perm[i]] for i in range(s)])
        torch.testing.assert_close(yp, expected, atol=1e-6, rtol=0)

    def test_grouped_matches_sets(self):
        block = DeepSetBlock(4)
        rng = np.random.default_rng(2)
        x = torch.as_tensor(rng.standard_normal((12, 4, 3)).astype(np.float32))
        groups = rng.permutation(np.repeat([5, 9, 11], 4))
        with torch.no_grad():
            y = block.forward_grouped(x, groups)
            for g in (5, 9, 11):
                rows = np.flatnonzero(groups == g)
                torch.testing.assert_close(y[rows], block(x[rows].unsqueeze(0)).squeeze(0))

    def test_grouped_ragged_fallback(self):
        block = DeepSetBlock(4)
        x = torch.randn(5, 4, 3)
        groups = np.array([0, 0, 0, 1, 1])
        with torch.no_grad():
            y = block.forward_grouped(x, groups)
            torch.testing.assert_close(y[3:], block(x[3:].unsqueeze(0)).squeeze(0))


class TestGrouping:
    def test_four_by_ten(self):
        rng = np.random.default_rng(0)
        f = FeatureTensor(rng.standard_normal((40, 3, 2)), "b", rng.permutation(np.repeat(np.arange(4), 10)))
        sb = group_into_sets(f)
        assert sb.shape == (4, 10, 3, 2)
        back = ungroup(sb)
        np.testing.assert_array_equal(back.values, f.values)
        np.testing.assert_array_equal(back.set_index, f.set_index)

    def test_unequal_sets(self):
        f = FeatureTensor(np.zeros((13, 2, 2)), "b", [0] * 3 + [1] * 10)
        with pytest.raises(GroupingError):
            group_into_sets(f)

    def test_partition_stable(self):
        order, ids, t = set_partition([1, 0, 1, 0])
        np.testing.assert_array_equal(order, [1, 3, 0, 2])
        assert list(ids) == [0, 1] and t == 2

    def test_deepset_block_wrapper(self):
        block = DeepSetBlock(3)
        f = FeatureTensor(np.random.default_rng(1).standard_normal((6, 3, 2)).astype(np.float32), "b",
                          [0, 1, 0, 1, 0, 1])
        sb = deepset_block(group_into_sets(f), block)
        assert isinstance(sb, SetBatch) and sb.shape == (2, 3, 3, 2)
