"""Dataset-level arrays for the fitting loop (internal fast path).

Stacks every subject's at-risk intervals and events per event type into
flat arrays with subject indices, so the E-step, the M-step kernels,
the batched marginal likelihood, and the score expectations all run as
vectorized passes.  Rows are ordered by subject, which makes
per-subject reductions plain ``reduceat`` segment sums; results are
therefore independent of any worker partitioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lik import SubjectWork
from .model import ModelParams

__all__ = ["TypeBlock", "StackedData", "segment_sum"]


def _csr_columns(mat: np.ndarray):
    """Column-wise CSR of a dense matrix: (indptr, row indices, values)."""
    R, L = mat.shape
    indptr = np.zeros(L + 1, dtype=np.int64)
    rows_list = []
    vals_list = []
    for l in range(L):
        nz = np.nonzero(mat[:, l])[0]
        indptr[l + 1] = indptr[l] + nz.size
        rows_list.append(nz.astype(np.int64))
        vals_list.append(mat[nz, l])
    rows = np.concatenate(rows_list) if rows_list else np.zeros(0, np.int64)
    vals = np.concatenate(vals_list) if vals_list else np.zeros(0)
    return indptr, rows, vals


@dataclass
class TypeBlock:
    """All subjects' at-risk intervals and events for one event type."""

    iv_subj: np.ndarray   # (R,) int64, sorted ascending
    iv_dur: np.ndarray    # (R,)
    iv_X: np.ndarray      # (R, L1)
    iv_Z: np.ndarray      # (R, L2)
    ev_subj: np.ndarray   # (E,) int64, sorted ascending
    ev_X: np.ndarray      # (E, L1)
    ev_Z: np.ndarray      # (E, L2)

    def __post_init__(self):
        # segment boundaries for per-subject reductions
        self.iv_starts, self.iv_seg_subj = _segments(self.iv_subj)
        self.ev_starts, self.ev_seg_subj = _segments(self.ev_subj)
        self.n_events = self.ev_subj.size
        self.sum_Xe = self.ev_X.sum(axis=0)
        # static column supports of the interval covariates
        self.x_indptr, self.x_rows, self.x_vals = _csr_columns(self.iv_X)
        self.z_indptr, self.z_rows, self.z_vals = _csr_columns(self.iv_Z)

    @property
    def L1(self) -> int:
        return self.iv_X.shape[1]

    @property
    def L2(self) -> int:
        return self.iv_Z.shape[1]


def _segments(subj: np.ndarray):
    if subj.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    change = np.nonzero(np.diff(subj))[0] + 1
    starts = np.concatenate([[0], change]).astype(np.int64)
    return starts, subj[starts]


def segment_sum(values: np.ndarray, starts: np.ndarray, seg_subj: np.ndarray, n: int):
    """Per-subject sums of row-sorted values; absent subjects get zero."""
    if values.ndim == 1:
        out = np.zeros(n)
    else:
        out = np.zeros((n,) + values.shape[1:])
    if starts.size:
        out[seg_subj] = np.add.reduceat(values, starts, axis=0)
    return out


class StackedData:
    """The whole dataset flattened per event type, plus per-subject summaries."""

    def __init__(self, works: list[SubjectWork]):
        if not works:
            raise ValueError("need at least one subject")
        self.works = works
        self.n = len(works)
        self.J = works[0].n_types
        self.blocks: list[TypeBlock] = []
        for j in range(self.J):
            iv_subj, iv_dur, iv_X, iv_Z = [], [], [], []
            ev_subj, ev_X, ev_Z = [], [], []
            for i, wk in enumerate(works):
                risk = wk.at_risk[j]
                m = int(risk.sum())
                if m:
                    iv_subj.append(np.full(m, i, np.int64))
                    iv_dur.append(wk.durations[risk])
                    iv_X.append(wk.x_iv[j][risk])
                    iv_Z.append(wk.z_iv[j][risk])
                e = wk.ev_times[j].size
                if e:
                    ev_subj.append(np.full(e, i, np.int64))
                    ev_X.append(wk.x_ev[j])
                    ev_Z.append(wk.z_ev[j])
            L1 = works[0].x_iv[j].shape[1]
            L2 = works[0].z_iv[j].shape[1]
            self.blocks.append(
                TypeBlock(
                    np.concatenate(iv_subj) if iv_subj else np.zeros(0, np.int64),
                    np.concatenate(iv_dur) if iv_dur else np.zeros(0),
                    np.concatenate(iv_X) if iv_X else np.zeros((0, L1)),
                    np.concatenate(iv_Z) if iv_Z else np.zeros((0, L2)),
                    np.concatenate(ev_subj) if ev_subj else np.zeros(0, np.int64),
                    np.concatenate(ev_X) if ev_X else np.zeros((0, L1)),
                    np.concatenate(ev_Z) if ev_Z else np.zeros((0, L2)),
                )
            )
        # per-subject event counts by type and event-side z sums
        self.ev_counts = np.zeros((self.n, self.J))
        self.ev_z_by_subj: list[np.ndarray] = []
        self.ev_x_by_subj: list[np.ndarray] = []
        for j, blk in enumerate(self.blocks):
            np.add.at(self.ev_counts[:, j], blk.ev_subj, 1.0)
            self.ev_z_by_subj.append(
                segment_sum(blk.ev_Z, blk.ev_starts, blk.ev_seg_subj, self.n)
            )
            self.ev_x_by_subj.append(
                segment_sum(blk.ev_X, blk.ev_starts, blk.ev_seg_subj, self.n)
            )

    def dims_fixed(self) -> list[int]:
        return [blk.L1 for blk in self.blocks]

    def dims_random(self) -> list[int]:
        return [blk.L2 for blk in self.blocks]

    def baseline_rates(self, min_exposure_frac: float = 0.01) -> np.ndarray:
        """Log event rate per type on its zero-covariate at-risk exposure.

        The intervals with all-zero covariates are the exposure that
        identifies the intercept separately from the last-event
        indicator block; when that exposure is negligible the marginal
        rate is used instead.  Counts are +0.5 smoothed.
        """
        out = np.empty(self.J)
        for j, blk in enumerate(self.blocks):
            total_time = float(np.sum(blk.iv_dur))
            zero_rows = ~blk.iv_X.any(axis=1)
            zero_time = float(np.sum(blk.iv_dur[zero_rows]))
            if blk.ev_X.shape[0]:
                zero_events = float(np.sum(~blk.ev_X.any(axis=1)))
            else:
                zero_events = 0.0
            if zero_time >= min_exposure_frac * max(total_time, 1e-300) and zero_time > 0:
                out[j] = np.log((zero_events + 0.5) / zero_time)
            elif total_time > 0:
                out[j] = np.log((blk.n_events + 0.5) / total_time)
            else:
                out[j] = 0.0
        return out

    # -- likelihood pieces ------------------------------------------------

    def base_weights(self, params: ModelParams, j: int) -> np.ndarray:
        """``duration * exp(beta0 + beta . x)`` per at-risk interval row."""
        blk = self.blocks[j]
        return blk.iv_dur * np.exp(params.beta0[j] + blk.iv_X @ params.beta[j])

    def loading_directions(self, params: ModelParams, j: int) -> np.ndarray:
        """``A_j^T z`` per interval row, shape (R, K)."""
        return self.blocks[j].iv_Z @ params.loadings[j]

    def exposure_weights(self, params: ModelParams, j: int, theta: np.ndarray):
        """``duration * exp(full linear predictor)`` per interval row."""
        blk = self.blocks[j]
        w0 = self.base_weights(params, j)
        if params.n_factors:
            v = self.loading_directions(params, j)
            w0 = w0 * np.exp(np.einsum("rk,rk->r", v, theta[blk.iv_subj]))
        return w0

    def event_theta_coef(self, params: ModelParams) -> np.ndarray:
        """Per-subject coefficient of theta in the event side: sum_j A_j^T (sum_e z)."""
        G = np.zeros((self.n, params.n_factors))
        for j in range(self.J):
            G += self.ev_z_by_subj[j] @ params.loadings[j]
        return G

    def event_const(self, params: ModelParams) -> np.ndarray:
        """Per-subject theta-free event side: sum_j sum_e (beta0 + beta . x)."""
        c = self.ev_counts @ params.beta0
        for j in range(self.J):
            c += self.ev_x_by_subj[j] @ params.beta[j]
        return c

    def cumulative_by_subject(
        self, params: ModelParams, theta: np.ndarray
    ) -> np.ndarray:
        """Total cumulative intensity per subject, summed over types."""
        out = np.zeros(self.n)
        for j in range(self.J):
            blk = self.blocks[j]
            w = self.exposure_weights(params, j, theta)
            out += segment_sum(w, blk.iv_starts, blk.iv_seg_subj, self.n)
        return out

    def data_loglik_by_subject(
        self, params: ModelParams, theta: np.ndarray
    ) -> np.ndarray:
        base = self.event_const(params)
        if params.n_factors:
            base = base + np.einsum(
                "nk,nk->n", self.event_theta_coef(params), theta
            )
        return base - self.cumulative_by_subject(params, theta)
