"""Truncated Smooth-AP ranking loss.

For each query q with at least one in-batch positive, the smooth average
precision is

    AP_q = (1/|P|) * sum_{i in P} (1 + sum_{j in P, j != i} G(d_i - d_j))
                                / (1 + sum_{j in O, j != i} G(d_i - d_j))

where P is the set of the k positives nearest to q in descriptor space
(all of them if there are fewer than k), O is P plus all in-batch
negatives of q, d_i is the Euclidean descriptor distance d(q, i), and
G(x; tau) = 1 / (1 + exp(-x / tau)) is a temperature-controlled sigmoid.
The loss is the mean of (1 - AP_q) over the queries that have a positive;
queries without one are excluded from the average.

The gradient with respect to the descriptors is analytic (chain rule
through G and the pairwise distances) and is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.01
    k: int = 4
    batch_size: int = 2048

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


def _sigmoid(x, tau):
    # clamp the exponent for stability; saturated values are exactly 0/1 anyway
    z = np.clip(-x / tau, -500.0, 500.0)
    return 1.0 / (1.0 + np.exp(z))


def tsap_loss(descriptors: np.ndarray, positives: np.ndarray, negatives: np.ndarray,
              cfg: LossConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss value, gradient w.r.t. descriptors, and per-query AP values.

    ``positives`` / ``negatives`` are (B, B) boolean relations; row q marks
    the candidates of query q. Self-pairs are ignored regardless of the
    relation. Queries whose positive row is empty are skipped; if every row
    is empty this raises.
    """
    desc = np.asarray(descriptors, dtype=np.float64)
    b = desc.shape[0]
    if positives.shape != (b, b) or negatives.shape != (b, b):
        raise ValueError("relation matrices must be (B, B)")
    diff = desc[:, None, :] - desc[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    tau = cfg.tau
    grad_dist = np.zeros((b, b))  # d loss / d dist[q, j], aggregated over queries
    ap_values = np.full(b, np.nan)
    scored = []
    self_mask = ~np.eye(b, dtype=bool)

    for q in range(b):
        pos_idx = np.nonzero(positives[q] & self_mask[q])[0]
        if pos_idx.size == 0:
            continue
        neg_idx = np.nonzero(negatives[q] & self_mask[q] & ~positives[q])[0]
        d_q = dist[q]
        # top-k positives by descriptor distance, ties broken by index
        order = np.lexsort((pos_idx, d_q[pos_idx]))
        top = pos_idx[order[: cfg.k]]
        omega = np.concatenate([top, neg_idx])

        m = top.size
        dp = d_q[top]
        do = d_q[omega]
        xp = dp[:, None] - dp[None, :]
        xo = dp[:, None] - do[None, :]
        gp = _sigmoid(xp, tau)
        go = _sigmoid(xo, tau)
        np.fill_diagonal(gp, 0.0)
        go[:, :m][np.eye(m, dtype=bool)] = 0.0  # omega[:m] == top, drop j == i

        num = 1.0 + gp.sum(axis=1)
        den = 1.0 + go.sum(axis=1)
        ap = (num / den).mean()
        ap_values[q] = ap
        scored.append(q)

        # d(1 - AP)/d G terms; G' = G (1 - G) / tau
        w_num = -(1.0 / m) / den  # coefficient on gp[i, j]
        w_den = (1.0 / m) * num / (den * den)  # coefficient on go[i, j]
        dgp = w_num[:, None] * gp * (1.0 - gp) / tau
        dgo = w_den[:, None] * go * (1.0 - go) / tau
        # xp[i, j] = dp_i - dp_j ; xo[i, j] = dp_i - do_j
        d_dp = dgp.sum(axis=1) - dgp.sum(axis=0) + dgo.sum(axis=1)
        d_do = -dgo.sum(axis=0)
        np.add.at(grad_dist[q], top, d_dp)
        np.add.at(grad_dist[q], omega, d_do)

    if not scored:
        raise ValueError("no valid query: every batch element lacks an in-batch positive")

    n_scored = len(scored)
    loss = float((1.0 - ap_values[scored]).mean())
    grad_dist /= n_scored

    # chain through dist[q, j] = |desc_q - desc_j|
    safe = np.where(dist > 0, dist, 1.0)
    direction = diff / safe[:, :, None]
    direction[dist == 0] = 0.0
    contrib = grad_dist[:, :, None] * direction
    grad_desc = contrib.sum(axis=1) - contrib.sum(axis=0)
    return loss, grad_desc.astype(descriptors.dtype), ap_values


def tsap_loss_tape(tape: Tape | None, descriptors: Var, positives, negatives,
                   cfg: LossConfig) -> Var:
    """Tape-recorded TSAP loss over a descriptor Var."""
    loss, grad, _ = tsap_loss(descriptors.data, positives, negatives, cfg)
    # match the descriptor dtype so the backward sweep does not promote
    out = Var(np.asarray(loss, dtype=descriptors.data.dtype))
    if tape is not None:
        tape.record(out, (descriptors,), lambda g: (g * grad,))
    return out
