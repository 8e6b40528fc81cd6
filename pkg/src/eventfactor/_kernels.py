"""Compiled coordinate-descent kernel (internal).

Mirrors the arithmetic of :mod:`eventfactor.mstep` exactly, one event
type per call, operating on flat arrays: exposure weights are updated
multiplicatively per accepted coordinate step, and column supports of
the static covariate matrices are visited in CSR form.  No fastmath:
results must be reproducible bit-for-bit across runs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# mask codes, kept in sync with model.Mask
PENALIZED = 0
FREE = 1
ZERO = 2
ONE = 3


@njit(cache=True)
def _scad_deriv(x, gamma, a):
    if x <= gamma:
        return gamma
    r = a * gamma - x
    if r < 0.0:
        r = 0.0
    return r / (a - 1.0)


@njit(cache=True)
def _scad_pen(x, gamma, a):
    if gamma == 0.0:
        return 0.0
    x = abs(x)
    if x <= gamma:
        return gamma * x
    if x < a * gamma:
        return (2.0 * a * gamma * x - x * x - gamma * gamma) / (2.0 * (a - 1.0))
    return gamma * gamma * (a + 1.0) / 2.0


@njit(cache=True)
def _soft(x, gamma):
    if x > gamma:
        return x - gamma
    if x < -gamma:
        return x + gamma
    return 0.0


@njit(cache=True)
def _update_coord(
    w, rows, vals, event_side, old, code, gamma, a, n_subjects, max_halvings
):
    """One coordinate update; returns (new_value, skipped_flag).

    ``rows``/``vals`` are the support and regressor values of the
    coordinate; ``w`` is updated in place when the step is accepted.
    """
    s1 = 0.0
    s2 = 0.0
    for t in range(rows.shape[0]):
        wf = w[rows[t]] * vals[t]
        s1 += wf
        s2 += wf * vals[t]
    d2 = -s2
    if d2 == 0.0:
        return old, True
    d1 = event_side - s1

    if code == PENALIZED and gamma > 0.0:
        lam = n_subjects * _scad_deriv(abs(old), gamma, a)
        candidate = -_soft(d1 - old * d2, lam) / d2
    else:
        candidate = old - d1 / d2
    if candidate == old:
        return old, False

    new = candidate
    accepted = False
    for _ in range(max_halvings + 1):
        delta = new - old
        gain = event_side * delta
        e1 = np.expm1(delta)
        for t in range(rows.shape[0]):
            v = vals[t]
            if v == 1.0:
                gain -= w[rows[t]] * e1
            else:
                gain -= w[rows[t]] * np.expm1(delta * v)
        if code == PENALIZED and gamma > 0.0:
            gain -= n_subjects * (_scad_pen(new, gamma, a) - _scad_pen(old, gamma, a))
        if gain >= 0.0:
            accepted = True
            break
        new = old + 0.5 * (new - old)
    if not accepted:
        new = old
    delta = new - old
    if delta != 0.0:
        ed = np.exp(delta)
        for t in range(rows.shape[0]):
            v = vals[t]
            if v == 1.0:
                w[rows[t]] *= ed
            else:
                w[rows[t]] *= np.exp(delta * v)
    return new, False


@njit(cache=True)
def sweep_type(
    w,            # (R,) exposure weights, updated in place
    n_ev,         # float: number of events of this type
    sum_Xe,       # (L1,) event-side sums of x
    se_A,         # (L2, K) event-side sums of z theta^T
    Th,           # (R, K) factor draws per interval row
    x_indptr, x_rows, x_vals,
    z_indptr, z_rows, z_vals,
    beta0_box,    # (1,) in/out
    beta,         # (L1,) in/out
    A,            # (L2, K) in/out
    V,            # (R, K) loading directions Z @ A, maintained in place
    beta_code,    # (L1,) int8
    A_code,       # (L2, K) int8
    n_subjects,   # float
    gamma1, gamma2, a,
    max_halvings,
    update_intercept,
):
    """Coordinate pass for one event type; returns (psi, skipped_count)."""
    skipped = 0

    # intercept: regressor identically one over all rows
    S = 0.0
    for r in range(w.shape[0]):
        S += w[r]
    if not update_intercept:
        pass
    elif S == 0.0:
        skipped += 1
    else:
        d1 = n_ev - S
        delta = d1 / S  # Newton step: -d1/d2 with d2 = -S
        accepted = False
        for _ in range(max_halvings + 1):
            gain = n_ev * delta - S * np.expm1(delta)
            if gain >= 0.0:
                accepted = True
                break
            delta *= 0.5
        if not accepted:
            delta = 0.0
        if delta != 0.0:
            beta0_box[0] = beta0_box[0] + delta
            scale = np.exp(delta)
            for r in range(w.shape[0]):
                w[r] *= scale

    for l in range(beta.shape[0]):
        code = beta_code[l]
        if code == ZERO or code == ONE:
            continue
        rows = x_rows[x_indptr[l]: x_indptr[l + 1]]
        vals = x_vals[x_indptr[l]: x_indptr[l + 1]]
        gamma = gamma1 if code == PENALIZED else 0.0
        new, skip = _update_coord(
            w, rows, vals, sum_Xe[l], beta[l], code, gamma, a, n_subjects, max_halvings
        )
        if skip:
            skipped += 1
        else:
            beta[l] = new

    K = A.shape[1]
    fbuf = np.empty(w.shape[0])
    for l in range(A.shape[0]):
        zrows = z_rows[z_indptr[l]: z_indptr[l + 1]]
        zvals = z_vals[z_indptr[l]: z_indptr[l + 1]]
        for k in range(K):
            code = A_code[l, k]
            if code == ZERO or code == ONE:
                continue
            for t in range(zrows.shape[0]):
                fbuf[t] = zvals[t] * Th[zrows[t], k]
            gamma = gamma2 if code == PENALIZED else 0.0
            new, skip = _update_coord(
                w,
                zrows,
                fbuf[: zrows.shape[0]],
                se_A[l, k],
                A[l, k],
                code,
                gamma,
                a,
                n_subjects,
                max_halvings,
            )
            if skip:
                skipped += 1
            else:
                delta = new - A[l, k]
                A[l, k] = new
                if delta != 0.0:
                    for t in range(zrows.shape[0]):
                        V[zrows[t], k] += delta * zvals[t]

    psi = n_ev * beta0_box[0]
    for l in range(beta.shape[0]):
        psi += sum_Xe[l] * beta[l]
    for l in range(A.shape[0]):
        for k in range(K):
            psi += se_A[l, k] * A[l, k]
    for r in range(w.shape[0]):
        psi -= w[r]
    return psi, skipped


@njit(cache=True)
def estep_propose(w, V, iv_subj, dtheta, w_prop, lam_prop):
    """Proposal exposure weights and their per-subject totals for one type.

    ``w_prop[r] = w[r] * exp(V[r] . dtheta[subject(r)])``; the totals
    accumulate into ``lam_prop`` (callers zero it across types).
    """
    R, K = V.shape
    for r in range(R):
        i = iv_subj[r]
        d = 0.0
        for k in range(K):
            d += V[r, k] * dtheta[i, k]
        wp = w[r] * np.exp(d)
        w_prop[r] = wp
        lam_prop[i] += wp


@njit(cache=True)
def estep_commit(w, w_prop, iv_subj, accepted):
    """Adopt proposal weights on the rows of accepted subjects."""
    for r in range(w.shape[0]):
        if accepted[iv_subj[r]]:
            w[r] = w_prop[r]


@njit(cache=True)
def segment_totals(w, iv_subj, out):
    """Per-subject sums of w, accumulated into out."""
    for r in range(w.shape[0]):
        out[iv_subj[r]] += w[r]
