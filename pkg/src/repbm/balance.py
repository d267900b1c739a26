"""Kernel MMD between factual and counterfactual representation samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    # a positive float, or "median" until resolve() is called
    bandwidth: float | str = "median"

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and self.bandwidth != "median" and not float(self.bandwidth) > 0:
            raise ValueError("rbf bandwidth must be positive")

    @property
    def resolved(self) -> bool:
        return self.kind == "linear" or self.bandwidth != "median"

    def resolve(self, *groups) -> "KernelSpec":
        if self.resolved:
            return self
        return KernelSpec(self.kind, median_bandwidth(*groups))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        bw = d.get("bandwidth", "median")
        return cls(d.get("kind", "rbf"), bw if bw == "median" else float(bw))


def kernel_eval(spec: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"kernel_eval: dimensions {x.size} and {y.size} differ")
    if spec.kind == "linear":
        return float(x @ y)
    if not spec.resolved:
        raise ValueError("rbf bandwidth is unresolved")
    sigma = float(spec.bandwidth)
    return float(np.exp(-np.sum((x - y) ** 2) / (2.0 * sigma * sigma)))


def as_samples(x) -> np.ndarray:
    """(n, d) sample matrix; a flat sequence is read as n one-dimensional points."""
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim <= 1 else x


def median_bandwidth(*groups) -> float:
    """Median pairwise Euclidean distance over the pooled samples (1 if that is 0)."""
    mats = [as_samples(g) for g in groups]
    mats = [m for m in mats if len(m)]
    pooled = np.concatenate(mats, axis=0) if mats else np.zeros((0, 1))
    if len(pooled) < 2:
        raise ValueError("median bandwidth needs at least two pooled samples")
    diff = pooled[:, None, :] - pooled[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(dist[iu]))
    return med if med > 0 else 1.0


def _gram(spec: KernelSpec, x: Tensor, y: Tensor) -> Tensor:
    if spec.kind == "linear":
        return ad.matmul(x, ad.transpose(y))
    sigma = float(spec.bandwidth)
    return ad.exp(ad.scalar_scale(ad.pairwise_sqdist(x, y), -1.0 / (2.0 * sigma * sigma)))


def mmd_squared(spec: KernelSpec, fact: Tensor, cf: Tensor) -> Tensor:
    """Biased V-statistic estimate of MMD^2 (differentiable)."""
    kff = ad.mean(_gram(spec, fact, fact))
    kcc = ad.mean(_gram(spec, cf, cf))
    # both orientations of the cross term keep the estimate exactly symmetric
    kfc = ad.mean(_gram(spec, fact, cf))
    kcf = ad.mean(_gram(spec, cf, fact))
    return ad.sub(ad.add(kff, kcc), ad.add(kfc, kcf))


def mmd_estimate(spec: KernelSpec, fact, cf) -> Tensor | None:
    """sqrt of the clamped V-statistic; ``None`` when either group has fewer than 2 samples."""
    fact = fact if isinstance(fact, Tensor) else Tensor(as_samples(fact))
    cf = cf if isinstance(cf, Tensor) else Tensor(as_samples(cf))
    if fact.shape[0] < 2 or cf.shape[0] < 2:
        return None
    if fact.shape[1] != cf.shape[1]:
        raise ValueError(f"mmd_estimate: sample dimensions {fact.shape[1]} and {cf.shape[1]} differ")
    if not spec.resolved:
        raise ValueError("resolve the kernel bandwidth before estimating MMD")
    # canonical row order: equal multisets give bit-identical Gram sums
    fact = ad.index_select(fact, _lex_order(fact.data))
    cf = ad.index_select(cf, _lex_order(cf.data))
    return ad.sqrt(mmd_squared(spec, fact, cf))


def _lex_order(x: np.ndarray) -> np.ndarray:
    return np.lexsort(x.T[::-1])


@dataclass
class _Bucket:
    ids: np.ndarray      # (G,) positions in the caller's group list
    rows: np.ndarray     # (G, m) row indices, padded with row 0
    weights: np.ndarray  # (G, m) +1/|F| on factual rows, -1/|CF| on counterfactual, 0 on padding


@dataclass
class GroupPlan:
    """Precomputed layout for evaluating many factual/counterfactual MMDs at once.

    Groups with fewer than two samples on either side are skipped. The rest are
    sorted by size and packed into padded buckets whose sizes differ by at most
    ``spread``, so a handful of batched ops replaces one small graph per group.
    """
    n_groups: int
    buckets: list

    @classmethod
    def build(cls, groups, spread: float = 2.0) -> "GroupPlan":
        eligible = [(i, np.asarray(f, dtype=np.int64), np.asarray(c, dtype=np.int64))
                    for i, (f, c) in enumerate(groups) if len(f) >= 2 and len(c) >= 2]
        eligible.sort(key=lambda g: -(len(g[1]) + len(g[2])))
        buckets, k = [], 0
        while k < len(eligible):
            m = len(eligible[k][1]) + len(eligible[k][2])
            j = k
            while j < len(eligible) and spread * (len(eligible[j][1]) + len(eligible[j][2])) >= m:
                j += 1
            members = eligible[k:j]
            rows = np.zeros((len(members), m), dtype=np.int64)
            wts = np.zeros((len(members), m))
            for r, (_, f, c) in enumerate(members):
                rows[r, :len(f)] = f
                rows[r, len(f):len(f) + len(c)] = c
                wts[r, :len(f)] = 1.0 / len(f)
                wts[r, len(f):len(f) + len(c)] = -1.0 / len(c)
            buckets.append(_Bucket(np.array([g[0] for g in members]), rows, wts))
            k = j
        return cls(len(groups), buckets)


def grouped_mmd(spec: KernelSpec, z: Tensor, plan: GroupPlan) -> tuple[Tensor | None, np.ndarray]:
    """Sum of ``mmd_estimate`` over the planned groups of rows of ``z``.

    Returns the differentiable sum (``None`` if no group is eligible) and the
    per-group values, with NaN for skipped groups.
    """
    if not spec.resolved:
        raise ValueError("resolve the kernel bandwidth before estimating MMD")
    per_group = np.full(plan.n_groups, np.nan)
    total = None
    for b in plan.buckets:
        x = ad.index_select(z, b.rows)
        if spec.kind == "linear":
            # ||mean_F - mean_CF||^2 is the V-statistic for the linear kernel
            w = Tensor(np.broadcast_to(b.weights[:, :, None], x.shape).copy())
            diff = ad.sum(ad.multiply(x, w), axis=1)
            sq = ad.sum(ad.square(diff), axis=1)
        else:
            sigma = float(spec.bandwidth)
            gram = ad.exp(ad.scalar_scale(ad.pairwise_sqdist(x, x), -1.0 / (2.0 * sigma * sigma)))
            outer = Tensor(b.weights[:, :, None] * b.weights[:, None, :])
            sq = ad.sum(ad.sum(ad.multiply(gram, outer), axis=2), axis=1)
        est = ad.sqrt(sq)
        per_group[b.ids] = est.data
        s = ad.sum(est)
        total = s if total is None else ad.add(total, s)
    return total, per_group
