"""Hot loops with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``EVIL_LAB_JIT`` is not set to
``0``. Both paths take pre-drawn random arrays, so they return bit-identical
results for the same inputs.
"""

import os

import numpy as np

# ---------------------------------------------------------------- numpy path


def np_count_nonpositive(bits, signs):
    """Number of rows where ``sum(bits * signs) <= 0``."""
    s = (bits.astype(np.int64) * signs.astype(np.int64)).sum(axis=1)
    return int(np.count_nonzero(s <= 0))


def np_budget_fill(keys, budget):
    """Per row, set the ``budget[r]`` positions with smallest key to 1.

    Equal keys resolve by lower column index.
    """
    order = np.argsort(keys, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(keys.shape[0])[:, None]
    ranks[rows, order] = np.arange(keys.shape[1])[None, :]
    return (ranks < np.asarray(budget)[:, None]).astype(np.uint8)


def np_rle_encode(bits):
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(bits)) + 1
    edges = np.concatenate(([0], change, [bits.size]))
    return np.diff(edges).astype(np.int64)


def np_rle_decode(first, runs, n):
    runs = np.asarray(runs, dtype=np.int64)
    vals = (np.arange(runs.size) + first) % 2
    out = np.repeat(vals.astype(np.uint8), runs)
    if out.size != n:
        raise ValueError(f"run lengths sum to {out.size}, expected {n}")
    return out


def np_adam_update(p, g, m, v, active, lr, b1, b2, c1, c2, eps):
    """Fused bias-corrected Adam update. Returns new ``(p, m, v)``; inactive coordinates are unchanged."""
    m2 = b1 * m + (1.0 - b1) * g
    v2 = b2 * v + (1.0 - b2) * (g * g)
    p2 = p - lr * (m2 / c1) / (np.sqrt(v2 / c2) + eps)
    if active is not None:
        m2 = np.where(active, m2, m)
        v2 = np.where(active, v2, v)
        p2 = np.where(active, p2, p)
    return p2, m2, v2


# ---------------------------------------------------------------- numba path


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def count_nonpositive(bits, signs):
        n, m = bits.shape
        count = 0
        for r in range(n):
            s = 0
            for j in range(m):
                s += np.int64(bits[r, j]) * np.int64(signs[r, j])
            if s <= 0:
                count += 1
        return count

    @njit(cache=True)
    def budget_fill(keys, budget):
        n, m = keys.shape
        out = np.zeros((n, m), dtype=np.uint8)
        for r in range(n):
            b = budget[r]
            if b <= 0:
                continue
            if b >= m:
                out[r, :] = 1
            elif b <= 16:
                # b passes of min-selection; strict < keeps the lower index on ties
                for _ in range(b):
                    best = -1
                    for j in range(m):
                        if out[r, j] == 0 and (best < 0 or keys[r, j] < keys[r, best]):
                            best = j
                    out[r, best] = 1
            else:
                order = np.argsort(keys[r], kind="mergesort")
                for j in range(b):
                    out[r, order[j]] = 1
        return out

    @njit(cache=True)
    def rle_encode(bits):
        n = bits.size
        runs = np.empty(n, dtype=np.int64)
        if n == 0:
            return runs[:0]
        k = 0
        run = 1
        for i in range(1, n):
            if bits[i] == bits[i - 1]:
                run += 1
            else:
                runs[k] = run
                k += 1
                run = 1
        runs[k] = run
        return runs[: k + 1].copy()

    @njit(cache=True)
    def adam_update(p, g, m, v, active, use_active, lr, b1, b2, c1, c2, eps):
        n = p.size
        p2 = np.empty(n)
        m2 = np.empty(n)
        v2 = np.empty(n)
        for i in range(n):
            if use_active and not active[i]:
                p2[i] = p[i]
                m2[i] = m[i]
                v2[i] = v[i]
                continue
            mi = b1 * m[i] + (1.0 - b1) * g[i]
            vi = b2 * v[i] + (1.0 - b2) * (g[i] * g[i])
            m2[i] = mi
            v2[i] = vi
            p2[i] = p[i] - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        return p2, m2, v2

    return count_nonpositive, budget_fill, rle_encode, adam_update


def _want_jit():
    return os.environ.get("EVIL_LAB_JIT", "1").strip().lower() not in ("0", "false", "no", "off")


USING_NUMBA = False
if _want_jit():
    try:
        _nb_count, _nb_fill, _nb_rle, _nb_adam = _build_numba()
        USING_NUMBA = True
    except ImportError:
        pass


def count_nonpositive(bits, signs):
    if USING_NUMBA:
        return int(_nb_count(np.ascontiguousarray(bits, dtype=np.uint8), np.ascontiguousarray(signs, dtype=np.int8)))
    return np_count_nonpositive(bits, signs)


def budget_fill(keys, budget):
    if USING_NUMBA:
        return _nb_fill(np.ascontiguousarray(keys, dtype=np.float64), np.ascontiguousarray(budget, dtype=np.int64))
    return np_budget_fill(keys, budget)


def rle_encode(bits):
    if USING_NUMBA:
        return _nb_rle(np.ascontiguousarray(bits, dtype=np.uint8))
    return np_rle_encode(bits)


def rle_decode(first, runs, n):
    return np_rle_decode(first, runs, n)


def adam_update(p, g, m, v, active, lr, b1, b2, c1, c2, eps):
    if USING_NUMBA:
        shape = p.shape
        flat = [np.ascontiguousarray(a, dtype=np.float64).reshape(-1) for a in (p, g, m, v)]
        act = np.ones(1, dtype=np.bool_) if active is None else np.ascontiguousarray(active, dtype=np.bool_).reshape(-1)
        out = _nb_adam(*flat, act, active is not None, lr, b1, b2, c1, c2, eps)
        return tuple(a.reshape(shape) for a in out)
    return np_adam_update(p, g, m, v, active, lr, b1, b2, c1, c2, eps)
