import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repbm import autodiff as ad
from repbm.autodiff import Tensor
from repbm.balance import GroupPlan, KernelSpec, grouped_mmd, kernel_eval, median_bandwidth, mmd_estimate

LIN = KernelSpec("linear")


def test_kernel_eval_examples():
    assert kernel_eval(KernelSpec("rbf", 1.3), [1.0, 2.0], [1.0, 2.0]) == 1.0
    assert kernel_eval(KernelSpec("rbf", 1.0), [0.0, 0.0], [1.0, 1.0]) == pytest.approx(math.exp(-1), abs=1e-15)
    assert kernel_eval(LIN, [1, 2], [3, 4]) == 11.0
    with pytest.raises(ValueError):
        kernel_eval(LIN, [1, 2], [1, 2, 3])


def test_median_bandwidth_examples():
    assert median_bandwidth([0.0], [1.0]) == 1.0
    assert median_bandwidth([2.0, 2.0], [2.0]) == 1.0
    assert median_bandwidth([0.0, 1.0], [3.0]) == 2.0
    with pytest.raises(ValueError):
        median_bandwidth([1.0], [])


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("laplace")
    with pytest.raises(ValueError):
        KernelSpec("rbf", -1.0)
    assert KernelSpec().resolve([0.0, 3.0]).bandwidth == 3.0
    with pytest.raises(ValueError):
        mmd_estimate(KernelSpec(), [[0.0], [1.0]], [[2.0], [3.0]])


def test_identical_multisets_exact_zero(rng):
    x = rng.normal(size=(7, 3))
    perm = x[rng.permutation(7)]
    assert mmd_estimate(KernelSpec("rbf", 0.8), x, perm).item() == 0.0
    assert mmd_estimate(LIN, x, perm).item() == 0.0


def test_two_point_closed_form():
    d = 1.5
    sigma = d / math.sqrt(2 * math.log(2))  # exp(-d^2 / 2 sigma^2) = 0.5
    est = mmd_estimate(KernelSpec("rbf", sigma), [[0.0], [0.0]], [[d], [d]])
    assert est.item() == pytest.approx(1.0, abs=1e-12)


def test_sparse_group_skips():
    assert mmd_estimate(LIN, [[0.0]], [[1.0], [2.0]]) is None
    assert mmd_estimate(LIN, [[0.0], [1.0]], np.zeros((0, 1))) is None


samples = st.integers(2, 8).flatmap(lambda n: st.tuples(st.just(n), st.integers(2, 8), st.integers(1, 3),
                                                           st.integers(0, 2 ** 31 - 1)))


@settings(max_examples=50, deadline=None)
@given(samples)
def test_symmetry_exact(case):
    n, m, d, seed = case
    rng = np.random.default_rng(seed)
    f, c = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    for spec in (KernelSpec("rbf", 0.9), LIN):
        assert mmd_estimate(spec, f, c).item() == mmd_estimate(spec, c, f).item()
        assert mmd_estimate(spec, f, c).item() >= 0.0


@settings(max_examples=50, deadline=None)
@given(samples)
def test_linear_kernel_is_mean_difference(case):
    n, m, d, seed = case
    rng = np.random.default_rng(seed)
    f, c = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    direct = np.linalg.norm(f.mean(axis=0) - c.mean(axis=0))
    assert abs(mmd_estimate(LIN, f, c).item() - direct) < 1e-10


@settings(max_examples=50, deadline=None)
@given(samples, st.floats(0.1, 10.0))
def test_rbf_scale_invariance(case, k):
    n, m, d, seed = case
    rng = np.random.default_rng(seed)
    f, c = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    a = mmd_estimate(KernelSpec("rbf", 1.1), f, c).item()
    b = mmd_estimate(KernelSpec("rbf", 1.1 * k), k * f, k * c).item()
    assert abs(a - b) < 1e-10


@pytest.mark.parametrize("spec", [KernelSpec("rbf", 1.2), LIN], ids=["rbf", "linear"])
def test_gradient_wrt_samples(spec, rng):
    f = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 2)) + 0.5, requires_grad=True)
    assert ad.finite_diff_check(lambda: mmd_estimate(spec, f, c), [f, c]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["rbf", "linear"]))
def test_grouped_matches_per_group(seed, kind):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(40, 3)), requires_grad=True)
    groups = []
    for _ in range(int(rng.integers(1, 8))):
        groups.append((rng.choice(40, int(rng.integers(0, 15)), replace=False),
                       rng.choice(40, int(rng.integers(0, 15)), replace=False)))
    spec = KernelSpec("rbf", 1.3) if kind == "rbf" else LIN
    total, per = grouped_mmd(spec, z, GroupPlan.build(groups))
    ref = [mmd_estimate(spec, ad.index_select(z, f), ad.index_select(z, c)) for f, c in groups]
    for p, r in zip(per, ref):
        assert (r is None and np.isnan(p)) or abs(p - r.item()) < 1e-12
    live = [r for r in ref if r is not None]
    if not live:
        assert total is None
        return
    s = live[0]
    for r in live[1:]:
        s = ad.add(s, r)
    assert abs(total.item() - s.item()) < 1e-12
    ad.backward(total)
    g = z.grad.copy()
    ad.zero_grad([z])
    ad.backward(s)
    np.testing.assert_allclose(g, z.grad, atol=1e-12)
