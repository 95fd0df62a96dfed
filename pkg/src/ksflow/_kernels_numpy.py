"""Pure-numpy twin of the numba kernel pass (KSFLOW_BACKEND=numpy)."""

import numpy as np

# Rows are processed in blocks so the broadcast (block, n, n) temporary stays
# small even on fine grids.
_BLOCK = 32


def softmin_pass(M, F):
    """out[k, j] = logsumexp_l(M[j, l] + F[k, l]) for an axis of the grid."""
    n0 = F.shape[0]
    out = np.empty_like(F)
    for start in range(0, n0, _BLOCK):
        X = F[start:start + _BLOCK, None, :] + M[None, :, :]
        m = X.max(axis=2)
        finite = m > -np.inf
        shifted = np.exp(X - np.where(finite, m, 0.0)[:, :, None],
                         where=finite[:, :, None], out=np.zeros_like(X))
        s = shifted.sum(axis=2)
        blk = np.full_like(m, -np.inf)
        np.log(s, where=finite, out=blk)
        blk[finite] += m[finite]
        out[start:start + _BLOCK] = blk
    return out
