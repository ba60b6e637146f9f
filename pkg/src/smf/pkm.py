"""Product-key memory layer.

A query is split in two halves, each half is scored against its own sub-key
table, and the top-k pairs of the k x k candidate grid give the retrieved
slots. Slot ``i * n_k + j`` pairs sub-key ``i`` of table one with sub-key ``j``
of table two.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor


@dataclass(frozen=True)
class MemoryConfig:
    n_k: int = 16
    heads: int = 2
    k: int = 4
    key_dim: int = 32
    d: int = 64

    def __post_init__(self):
        if self.key_dim % 2:
            raise ValueError(f"key_dim must be even, got {self.key_dim}")
        if not 1 <= self.k <= self.M:
            raise ValueError(f"k={self.k} must lie in [1, M={self.M}]")
        if self.n_k < 1 or self.heads < 1 or self.d < 1:
            raise ValueError(f"invalid memory config {self}")

    @property
    def M(self) -> int:
        return self.n_k * self.n_k

    @property
    def half(self) -> int:
        return self.key_dim // 2

    @classmethod
    def paper(cls) -> "MemoryConfig":
        return cls(n_k=128, heads=4, k=16, key_dim=256, d=896)

    def param_count(self) -> dict[str, int]:
        d, H = self.d, self.heads
        return {
            "W_q": H * self.key_dim * d,
            "subkeys_1": H * self.n_k * self.half,
            "subkeys_2": H * self.n_k * self.half,
            "values": self.M * d,
            "W_g": d * d,
            "W_o": d * d,
        }


class MemoryParams:
    """Trainable tensors of one memory layer. ``values`` is never shared."""

    NAMES = ("W_q", "subkeys_1", "subkeys_2", "values", "W_g", "W_o")

    def __init__(self, cfg: MemoryConfig, rng: np.random.Generator, dtype=np.float64,
                 prefix: str = "memory", std: float = 0.02):
        self.cfg = cfg
        H, d = cfg.heads, cfg.d

        def normal(name, shape):
            return Parameter(rng.normal(0.0, std, size=shape).astype(dtype), name=f"{prefix}.{name}")

        self.W_q = normal("W_q", (H * cfg.key_dim, d))
        self.subkeys_1 = normal("subkeys_1", (H, cfg.n_k, cfg.half))
        self.subkeys_2 = normal("subkeys_2", (H, cfg.n_k, cfg.half))
        # zero values make a fresh memory an exact no-op
        self.values = Parameter(np.zeros((cfg.M, d), dtype=dtype), name=f"{prefix}.values")
        self.W_g = normal("W_g", (d, d))
        self.W_o = normal("W_o", (d, d))

    def named(self) -> dict[str, Parameter]:
        return {getattr(self, n).name: getattr(self, n) for n in self.NAMES}


@dataclass
class RetrievalResult:
    indices: np.ndarray  # (tokens, heads, k) flat slot ids
    weights: np.ndarray  # (tokens, heads, k) softmax probabilities
    readout: np.ndarray | None = None  # (tokens, d), heads summed


@dataclass
class AccessCounts:
    counts: np.ndarray
    total: int = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.total = int(self.counts.sum())

    @property
    def accessed(self) -> np.ndarray:
        return self.counts > 0

    def __add__(self, other: "AccessCounts") -> "AccessCounts":
        return AccessCounts(self.counts + other.counts)


def _candidates(q: np.ndarray, params: MemoryParams, cfg: MemoryConfig):
    """Non-differentiable factored search. q: (N, H, key_dim) -> slot ids (N, H, k)."""
    h = cfg.half
    s1 = np.einsum("nhc,hic->nhi", q[..., :h], params.subkeys_1.data)
    s2 = np.einsum("nhc,hic->nhi", q[..., h:], params.subkeys_2.data)
    kk = min(cfg.k, cfg.n_k)
    v1, i1 = nx.topk(s1, kk)
    v2, i2 = nx.topk(s2, kk)
    grid = (v1[..., :, None] + v2[..., None, :]).reshape(*v1.shape[:-1], kk * kk)
    _, best = nx.topk(grid, cfg.k)
    ii = np.take_along_axis(i1, best // kk, axis=-1)
    jj = np.take_along_axis(i2, best % kk, axis=-1)
    return ii, jj


def _flatten_tokens(h) -> Tensor:
    h = nx.as_tensor(h)
    return h if h.ndim == 2 else nx.reshape(h, (-1, h.shape[-1]))


def _readout(x: Tensor, params: MemoryParams, cfg: MemoryConfig):
    if x.shape[-1] != cfg.d:
        raise nx.ShapeError(f"memory: input width {x.shape[-1]} != d={cfg.d}")
    N, H, h = x.shape[0], cfg.heads, cfg.half
    q = nx.reshape(nx.linear(x, params.W_q), (N, H, cfg.key_dim))
    ii, jj = _candidates(q.data, params, cfg)

    # differentiable scores of the selected pairs only
    head_off = (np.arange(H) * cfg.n_k)[None, :, None]
    k1 = nx.take(nx.reshape(params.subkeys_1, (H * cfg.n_k, h)), ii + head_off)  # (N,H,k,h)
    k2 = nx.take(nx.reshape(params.subkeys_2, (H * cfg.n_k, h)), jj + head_off)
    q1 = nx.reshape(nx.slice_(q, (Ellipsis, slice(0, h))), (N, H, h, 1))
    q2 = nx.reshape(nx.slice_(q, (Ellipsis, slice(h, None))), (N, H, h, 1))
    scores = nx.reshape(nx.add(nx.matmul(k1, q1), nx.matmul(k2, q2)), (N, H, cfg.k))
    p = nx.softmax(scores)

    slots = ii * cfg.n_k + jj
    vals = nx.take(params.values, slots)  # (N,H,k,d)
    r = nx.matmul(nx.reshape(p, (N, H, 1, cfg.k)), vals)  # (N,H,1,d)
    r = nx.sum_(nx.reshape(r, (N, H, cfg.d)), axis=1)
    return r, RetrievalResult(indices=slots, weights=p.data, readout=r.data)


def retrieve(h, params: MemoryParams, cfg: MemoryConfig) -> RetrievalResult:
    with nx.no_grad():
        _, res = _readout(_flatten_tokens(h), params, cfg)
    return res


def memory_forward(h, params: MemoryParams, cfg: MemoryConfig) -> tuple[Tensor, RetrievalResult]:
    """W_o (r(h) * silu(W_g h)); output keeps the leading shape of ``h``."""
    h = nx.as_tensor(h)
    x = _flatten_tokens(h)
    r, res = _readout(x, params, cfg)
    gate = nx.silu(nx.linear(x, params.W_g))
    out = nx.linear(nx.mul(r, gate), params.W_o)
    if h.ndim != 2:
        out = nx.reshape(out, h.shape)
    return out, res


def count_accesses(results, M: int, token_mask: np.ndarray | None = None) -> AccessCounts:
    """c(i) = number of (token, head, neighbor) triples that read slot i."""
    if isinstance(results, RetrievalResult):
        results = [results]
    counts = np.zeros(M, dtype=np.int64)
    for res in results:
        idx = res.indices
        if token_mask is not None:
            idx = idx[np.asarray(token_mask, dtype=bool).reshape(-1)]
        counts += np.bincount(idx.reshape(-1), minlength=M)
    return AccessCounts(counts)

