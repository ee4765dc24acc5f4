"""Pure numpy implementations of the seen/unseen sweep kernels.

Conventions shared with the compiled module: ``gap = max_seen - max_unseen``;
an instance is routed to the seen side at calibration ``gamma`` iff
``gap >= gamma``. ``seen_ok`` marks seen instances whose within-seen argmax is
right, ``unseen_ok`` unseen instances whose within-unseen argmax is right.
"""
import numpy as np

BACKEND = "python"


def joint_correct_counts(gap, seen_ok, unseen_ok, gammas):
    gap = np.asarray(gap, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    gs = np.sort(gap[np.asarray(seen_ok, dtype=bool)])
    gu = np.sort(gap[np.asarray(unseen_ok, dtype=bool)])
    seen = gs.size - np.searchsorted(gs, gammas, side="left")
    unseen = np.searchsorted(gu, gammas, side="left")
    return seen.astype(np.int64), unseen.astype(np.int64)


def su_curve(gap, seen_ok, unseen_ok, n_seen, n_unseen):
    """Curve points at every breakpoint, from gamma=-inf to gamma=+inf.

    Returns ``(gammas, acc_seen, acc_unseen)``; the first gamma is ``-inf``
    and each later one is a distinct gap value just exceeded.
    """
    gap = np.asarray(gap, dtype=np.float64)
    order = np.argsort(gap, kind="stable")
    g = gap[order]
    s = np.asarray(seen_ok, dtype=np.float64)[order]
    u = np.asarray(unseen_ok, dtype=np.float64)[order]
    last = np.flatnonzero(np.r_[g[1:] != g[:-1], True])
    cs = np.cumsum(s)[last]
    cu = np.cumsum(u)[last]
    inv_s = 1.0 / n_seen if n_seen else 0.0
    inv_u = 1.0 / n_unseen if n_unseen else 0.0
    total_s = s.sum()
    acc_s = np.r_[total_s, total_s - cs] * inv_s
    acc_u = np.r_[0.0, cu] * inv_u
    gammas = np.r_[-np.inf, np.nextafter(g[last], np.inf)]
    return gammas, acc_s, acc_u


def ausuc_area(gap, seen_ok, unseen_ok, n_seen, n_unseen):
    _, acc_s, acc_u = su_curve(gap, seen_ok, unseen_ok, n_seen, n_unseen)
    return float(np.sum(np.diff(acc_u) * (acc_s[1:] + acc_s[:-1]) * 0.5))
