"""Replication-level selection and estimation quality metrics.

Selection metrics compare recovered supports with the truth over the
full free-parameter vector: intercepts and covariance coordinates are
unpenalized and count as always-recovered nonzeros, fixed (anchor)
entries are excluded, and the false-discovery denominator is the count
of true zeros.  Estimation metrics (bias, average standard error,
sampling SD, coverage) are computed per coordinate over the replicates
whose selected support matches the true structure exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import Coordinate
from .lik import tril_indices
from .model import ConstraintMask, Mask, ModelParams
from .select import SupportMask

__all__ = [
    "ReplicationRecord",
    "ShapeMismatch",
    "InsufficientReplicates",
    "truth_support",
    "support_coordinates",
    "extract_estimates",
    "selection_metrics",
    "estimation_metrics",
    "format_selection_report",
    "format_estimation_report",
]


class ShapeMismatch(ValueError):
    pass


class InsufficientReplicates(ValueError):
    pass


@dataclass
class ReplicationRecord:
    """One replication's supports and (optionally) selected estimates.

    Grid supports may be SupportMask objects or their digests (the BIC
    table's support-hash column).
    """

    replicate_id: int
    grid_supports: list
    selected_support: SupportMask
    estimates: np.ndarray | None = None  # over the true-support coordinates
    ses: np.ndarray | None = None


def truth_support(params: ModelParams) -> SupportMask:
    return SupportMask.of_params(params)


def _free_sigma_count(mask: ConstraintMask) -> int:
    K = mask.n_factors
    if mask.mode == "anchor_sigma":
        return K * (K - 1) // 2
    return K * (K + 1) // 2


def _free_cells(mask_arrays):
    return [
        (m != Mask.ZERO) & (m != Mask.ONE) for m in mask_arrays
    ]


def _check_shapes(support: SupportMask, truth: SupportMask):
    if len(support.beta) != len(truth.beta) or any(
        a.shape != b.shape for a, b in zip(support.beta, truth.beta)
    ):
        raise ShapeMismatch("support/truth beta shapes disagree")
    if any(a.shape != b.shape for a, b in zip(support.loadings, truth.loadings)):
        raise ShapeMismatch("support/truth loading shapes disagree")


def _support_equal_free(support: SupportMask, truth: SupportMask, mask: ConstraintMask) -> bool:
    for free, s, t in zip(_free_cells(mask.beta), support.beta, truth.beta):
        if not np.array_equal(s[free], t[free]):
            return False
    for free, s, t in zip(_free_cells(mask.loadings), support.loadings, truth.loadings):
        if not np.array_equal(s[free], t[free]):
            return False
    return True


def selection_metrics(
    records: list[ReplicationRecord],
    truth: SupportMask,
    mask: ConstraintMask,
) -> dict:
    """C0, C1, TPR, FDR averaged over replicates.

    C0: some grid point recovered the exact support.  C1: the selected
    point did.  TPR and FDR use the selected support, with denominators
    the counts of true nonzeros and true zeros over the full free
    parameter vector (intercepts and covariance always nonzero).
    """
    if not records:
        raise InsufficientReplicates("need at least one record")
    J = len(truth.beta)
    always_nonzero = J + _free_sigma_count(mask)
    free_beta = _free_cells(mask.beta)
    free_load = _free_cells(mask.loadings)
    n_true_nonzero = always_nonzero + int(
        sum(t[f].sum() for f, t in zip(free_beta, truth.beta))
        + sum(t[f].sum() for f, t in zip(free_load, truth.loadings))
    )
    n_true_zero = int(
        sum((~t[f]).sum() for f, t in zip(free_beta, truth.beta))
        + sum((~t[f]).sum() for f, t in zip(free_load, truth.loadings))
    )

    truth_digest = truth.digest()

    def hits_truth(support) -> bool:
        if isinstance(support, str):
            return support == truth_digest
        return _support_equal_free(support, truth, mask)

    c0 = c1 = tpr = fdr = 0.0
    for rec in records:
        _check_shapes(rec.selected_support, truth)
        c0 += any(hits_truth(s) for s in rec.grid_supports)
        c1 += _support_equal_free(rec.selected_support, truth, mask)
        tp = always_nonzero
        fp = 0
        for f, s, t in zip(free_beta, rec.selected_support.beta, truth.beta):
            tp += int(np.sum(s[f] & t[f]))
            fp += int(np.sum(s[f] & ~t[f]))
        for f, s, t in zip(free_load, rec.selected_support.loadings, truth.loadings):
            tp += int(np.sum(s[f] & t[f]))
            fp += int(np.sum(s[f] & ~t[f]))
        tpr += tp / n_true_nonzero
        fdr += fp / n_true_zero
    m = len(records)
    return {
        "C0": c0 / m,
        "C1": c1 / m,
        "TPR": tpr / m,
        "FDR": fdr / m,
        "n_replicates": m,
        "n_true_nonzero": n_true_nonzero,
        "n_true_zero": n_true_zero,
    }


def support_coordinates(
    truth: ModelParams, mask: ConstraintMask
) -> tuple[list[Coordinate], np.ndarray]:
    """True-support coordinates in reporting order, with their true values.

    Order: intercepts by type; nonzero fixed effects by (type, covariate);
    nonzero loadings by (factor, type, covariate); covariance lower
    triangle (off-diagonal only under a unit-diagonal constraint).
    """
    coords: list[Coordinate] = []
    values: list[float] = []
    J, K = truth.n_types, truth.n_factors
    for j in range(J):
        coords.append(Coordinate("beta0", j=j))
        values.append(float(truth.beta0[j]))
    for j in range(J):
        for l in range(truth.beta[j].shape[0]):
            if truth.beta[j][l] != 0 and mask.beta[j][l] not in (Mask.ZERO, Mask.ONE):
                coords.append(Coordinate("beta", j=j, l=l))
                values.append(float(truth.beta[j][l]))
    for k in range(K):
        for j in range(J):
            A = truth.loadings[j]
            for l in range(A.shape[0]):
                if A[l, k] != 0 and mask.loadings[j][l, k] != Mask.ZERO:
                    coords.append(Coordinate("loading", j=j, l=l, k=k))
                    values.append(float(A[l, k]))
    for (k, l) in tril_indices(K):
        if mask.mode == "anchor_sigma" and k == l:
            continue
        coords.append(Coordinate("sigma", l=k, k=l))
        values.append(float(truth.sigma[k, l]))
    return coords, np.array(values)


def extract_estimates(
    params: ModelParams,
    coords: list[Coordinate],
    se_values: np.ndarray | None = None,
    se_coords: list[Coordinate] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Estimates (and matched SEs) of ``params`` at the given coordinates."""
    est = np.empty(len(coords))
    for i, c in enumerate(coords):
        if c.kind == "beta0":
            est[i] = params.beta0[c.j]
        elif c.kind == "beta":
            est[i] = params.beta[c.j][c.l]
        elif c.kind == "loading":
            est[i] = params.loadings[c.j][c.l, c.k]
        else:
            est[i] = params.sigma[c.l, c.k]
    ses = np.full(len(coords), np.nan)
    if se_values is not None and se_coords is not None:
        lookup = {c: v for c, v in zip(se_coords, se_values)}
        for i, c in enumerate(coords):
            ses[i] = lookup.get(c, np.nan)
    return est, ses


def estimation_metrics(
    records: list[ReplicationRecord],
    truth_values: np.ndarray,
    truth: SupportMask,
    mask: ConstraintMask,
) -> dict:
    """Per-coordinate bias, mean SE, sampling SD, and 95% coverage.

    Only structure-matching replicates with estimates enter; at least
    two are required.
    """
    matching = [
        rec
        for rec in records
        if rec.estimates is not None
        and _support_equal_free(rec.selected_support, truth, mask)
    ]
    if len(matching) < 2:
        raise InsufficientReplicates(
            f"need at least 2 structure-matching replicates, have {len(matching)}"
        )
    est = np.stack([rec.estimates for rec in matching])  # (m, d)
    ses = np.stack(
        [rec.ses if rec.ses is not None else np.full_like(rec.estimates, np.nan)
         for rec in matching]
    )
    bias = est.mean(axis=0) - truth_values
    sd = est.std(axis=0, ddof=1)
    mean_se = np.nanmean(ses, axis=0)
    with np.errstate(invalid="ignore"):
        covered = np.abs(est - truth_values[None, :]) <= 1.96 * ses
    cp = np.nanmean(np.where(np.isnan(ses), np.nan, covered.astype(float)), axis=0)
    return {
        "bias": bias,
        "mean_se": mean_se,
        "sd": sd,
        "cp": cp,
        "n_matching": len(matching),
    }


def format_selection_report(metrics: dict) -> str:
    lines = ["metric\tvalue"]
    for key in ("C0", "C1", "TPR", "FDR"):
        lines.append(f"{key}\t{metrics[key]!r}")
    lines.append(f"n_replicates\t{metrics['n_replicates']}")
    return "\n".join(lines) + "\n"


def format_estimation_report(
    metrics: dict,
    coords: list[Coordinate],
    truth_values: np.ndarray,
    event_labels=None,
    covariate_labels=None,
) -> str:
    lines = ["coordinate\ttrue\tbias\tse\tsd\tcp"]
    for i, c in enumerate(coords):
        lines.append(
            "\t".join(
                [
                    c.name(event_labels, covariate_labels),
                    repr(float(truth_values[i])),
                    repr(float(metrics["bias"][i])),
                    repr(float(metrics["mean_se"][i])),
                    repr(float(metrics["sd"][i])),
                    repr(float(metrics["cp"][i])),
                ]
            )
        )
    return "\n".join(lines) + "\n"
