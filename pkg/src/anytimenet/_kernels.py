"""Hot numeric kernels.

The fused softmax cross-entropy and the Gram-Schmidt projection have a
numba ``@njit`` version and a pure-numpy version with the same signature.
The numba path is used when numba imports cleanly and the environment
variable ``ANYTIMENET_DISABLE_NUMBA`` is unset (or ``0``).  Matrix products
always go to BLAS.

Both paths are deterministic for fixed inputs but not bit-identical to each
other, since the numba loops sum in a different order from numpy's
vectorized reductions.
"""
import os

import numpy as np

_FLAG = os.environ.get("ANYTIMENET_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
except ImportError:
    njit = None

USE_NUMBA = njit is not None
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path

def _np_matmul(a, b):
    return a @ b


def _np_matmul_tn(a, b):
    return a.T @ b


def _np_matmul_nt(a, b):
    return a @ b.T


def _np_softmax_xent(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1)
    rows = np.arange(logits.shape[0])
    loss = np.mean(np.log(denom) - shifted[rows, labels])
    dlogits = expd / denom[:, None]
    dlogits[rows, labels] -= 1.0
    dlogits /= logits.shape[0]
    return loss, dlogits


def _np_orthogonalize(G, tau):
    n = G.shape[0]
    skipped = 0
    for j in range(1, n):
        for e in range(j):
            nrm2 = float(np.dot(G[e], G[e]))
            if np.sqrt(nrm2) <= tau:
                skipped += 1
                continue
            coef = float(np.dot(G[j], G[e])) / nrm2
            G[j] -= coef * G[e]
    return skipped


# BLAS beats hand-written loops at every layer shape we use
matmul = _np_matmul
matmul_tn = _np_matmul_tn
matmul_nt = _np_matmul_nt

# ---------------------------------------------------------------- numba path

if USE_NUMBA:

    @njit(cache=True, nogil=True)
    def _nb_softmax_xent(logits, labels):
        m, k = logits.shape
        dlogits = np.empty((m, k))
        total = 0.0
        for i in range(m):
            mx = logits[i, 0]
            for c in range(1, k):
                if logits[i, c] > mx:
                    mx = logits[i, c]
            denom = 0.0
            for c in range(k):
                e = np.exp(logits[i, c] - mx)
                dlogits[i, c] = e
                denom += e
            total += np.log(denom) - (logits[i, labels[i]] - mx)
            for c in range(k):
                dlogits[i, c] = dlogits[i, c] / denom / m
            dlogits[i, labels[i]] -= 1.0 / m
        return total / m, dlogits

    @njit(cache=True, nogil=True)
    def _nb_orthogonalize(G, tau):
        n, d = G.shape
        skipped = 0
        for j in range(1, n):
            for e in range(j):
                nrm2 = 0.0
                for t in range(d):
                    nrm2 += G[e, t] * G[e, t]
                if np.sqrt(nrm2) <= tau:
                    skipped += 1
                    continue
                dot = 0.0
                for t in range(d):
                    dot += G[j, t] * G[e, t]
                coef = dot / nrm2
                for t in range(d):
                    G[j, t] -= coef * G[e, t]
        return skipped

    softmax_xent = _nb_softmax_xent
    orthogonalize_rows = _nb_orthogonalize
else:
    softmax_xent = _np_softmax_xent
    orthogonalize_rows = _np_orthogonalize


def warmup():
    """Compile every kernel once (no-op on the numpy path)."""
    softmax_xent(np.zeros((2, 3)), np.zeros(2, dtype=np.int64))
    orthogonalize_rows(np.eye(2), 1e-12)
