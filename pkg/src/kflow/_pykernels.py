"""Pure numpy implementations of the hot loops.

These are the reference versions; ``kflow._ckernels`` mirrors every
function here with identical signatures and results.
"""
import numpy as np

TV = 0
W1 = 1

# chunk bound (in float64 elements) for batched Kronecker powers
_CHUNK_ELEMS = 1 << 22


def chain_product(mats):
    """Left-to-right product ``mats[0] @ mats[1] @ ... @ mats[k-1]``."""
    mats = np.asarray(mats, dtype=np.float64)
    k, m, _ = mats.shape
    if k == 0:
        return np.eye(m)
    out = mats[0].copy()
    for i in range(1, k):
        out = out @ mats[i]
    return out


def poisson_products(counts, choices, jumps):
    """Ordered products of jump matrices.

    Sample ``s`` is ``jumps[c_0] @ jumps[c_1] @ ...`` over its slice of
    ``choices`` (``counts[s]`` entries, read consecutively).
    """
    counts = np.asarray(counts, dtype=np.int64)
    choices = np.asarray(choices, dtype=np.int64)
    jumps = np.asarray(jumps, dtype=np.float64)
    S = counts.shape[0]
    m = jumps.shape[1]
    out = np.broadcast_to(np.eye(m), (S, m, m)).copy()
    if S == 0:
        return out
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    kmax = int(counts.max()) if S else 0
    for k in range(kmax):
        live = counts > k
        idx = choices[offsets[live] + k]
        out[live] = np.matmul(out[live], jumps[idx])
    return out


def _kron_power(batch, n):
    res = batch
    m = batch.shape[1]
    for _ in range(n - 1):
        S, r, _ = res.shape
        res = np.einsum("sab,scd->sacbd", res, batch).reshape(S, r * m, r * m)
    return res


def tensor_moments(kernels, n):
    """Sum and sum of squares of the n-fold Kronecker power over a batch."""
    kernels = np.asarray(kernels, dtype=np.float64)
    S, m, _ = kernels.shape
    size = m ** n
    total = np.zeros((size, size))
    total_sq = np.zeros((size, size))
    chunk = max(1, _CHUNK_ELEMS // (size * size))
    for start in range(0, S, chunk):
        block = _kron_power(kernels[start:start + chunk], n)
        total += block.sum(axis=0)
        total_sq += np.square(block).sum(axis=0)
    return total, total_sq


def _pair_distance(a, b, spacing, kind):
    if kind == TV:
        return 0.5 * np.abs(a - b).sum(axis=-1)
    diff = np.abs(np.cumsum(a - b, axis=-1)[..., :-1])
    return (diff * spacing).sum(axis=-1)


def select_rows(mu, idx, coords, tol, kind):
    """Batched limit-point selection along approximating index sequences.

    For sample ``s`` and point ``x`` the sequence is
    ``mu[s, idx[x, j]]`` for ``j = 0..J-1``.  The selected element is the
    earliest ``j <= J-2`` whose every later element lies within ``tol``;
    if there is none the last element is returned and the flag is set.
    """
    mu = np.asarray(mu, dtype=np.float64)
    idx = np.asarray(idx, dtype=np.int64)
    S, _, m = mu.shape
    nx, J = idx.shape
    spacing = np.diff(np.asarray(coords, dtype=np.float64)) if kind == W1 else None
    seq = mu[:, idx]  # (S, nx, J, m)
    chosen = np.full((S, nx), J - 1, dtype=np.int64)
    flags = np.ones((S, nx), dtype=np.uint8)
    for j in range(J - 2, -1, -1):
        d = _pair_distance(seq[:, :, j:j + 1, :], seq[:, :, j + 1:, :], spacing, kind)
        ok = np.all(d <= tol, axis=-1)
        chosen[ok] = j
        flags[ok] = 0
    out = np.take_along_axis(seq, chosen[:, :, None, None], axis=2)[:, :, 0, :]
    return out, flags


def compose_site_maps(counts, coins, m):
    """Compose per-step site maps ``y -> y + coin[y] (mod m)``.

    ``coins`` has shape (sum(counts), m) with entries in {-1, +1}; sample
    ``s`` uses ``counts[s]`` consecutive rows.  Returns the image of every
    starting site, shape (S, m).
    """
    counts = np.asarray(counts, dtype=np.int64)
    coins = np.asarray(coins, dtype=np.int64)
    S = counts.shape[0]
    pos = np.broadcast_to(np.arange(m, dtype=np.int64), (S, m)).copy()
    if S == 0:
        return pos
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    kmax = int(counts.max())
    for k in range(kmax):
        live = np.nonzero(counts > k)[0]
        step = coins[offsets[live] + k]  # (L, m)
        p = pos[live]
        pos[live] = (p + np.take_along_axis(step, p, axis=1)) % m
    return pos
