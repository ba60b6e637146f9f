"""
Product-key memory lookup
=========================

A memory layer holds n_k * n_k value rows. A query never scores all of them:
it is split in half, each half is scored against n_k sub-keys, and only the
k x k combinations of the two shortlists are considered.
"""

import numpy as np

from smf.pkm import MemoryConfig, MemoryParams, count_accesses, memory_forward, retrieve

# a small memory: 16 x 16 = 256 slots, 2 read heads, 4 neighbours per head
cfg = MemoryConfig(n_k=16, heads=2, k=4, key_dim=16, d=32)
rng = np.random.default_rng(0)
mem = MemoryParams(cfg, rng, dtype=np.float64, std=1.0)
print("slots:", cfg.M, " parameters per group:", cfg.param_count())

# five token states
h = rng.normal(size=(5, cfg.d))
res = retrieve(h, mem, cfg)
print("indices shape (tokens, heads, k):", res.indices.shape)
print("token 0, head 0 reads slots", res.indices[0, 0], "with weights", np.round(res.weights[0, 0], 3))

# the same answer by brute force: score every slot with its full key
q = (h @ mem.W_q.data.T).reshape(5, cfg.heads, cfg.key_dim)
half = cfg.key_dim // 2
full = (q[:, 0, :half] @ mem.subkeys_1.data[0].T)[:, :, None] + (q[:, 0, half:] @ mem.subkeys_2.data[0].T)[:, None, :]
best = np.argsort(-full.reshape(5, -1), axis=1, kind="stable")[:, : cfg.k]
print("brute force agrees for head 0:", np.array_equal(np.sort(best, 1), np.sort(res.indices[:, 0], 1)))

# values start at zero, so a fresh memory adds nothing to the residual stream
out, _ = memory_forward(h, mem, cfg)
print("fresh memory output is all zeros:", not out.data.any())

# access counts are what the sparse finetuner ranks
counts = count_accesses(res, cfg.M)
print("reads:", counts.total, "= tokens x heads x k =", 5 * cfg.heads * cfg.k)
print("distinct slots touched:", int(counts.accessed.sum()), "of", cfg.M)
