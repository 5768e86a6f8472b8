"""Teacher/student similarity losses over one query's candidate list.

Every function takes teacher scores ``t`` and student scores ``s`` (1-D,
equal length) and returns ``(loss, dloss/ds)``. Lower is better for all of
them; the trainer minimises their sum.
"""

from __future__ import annotations

from enum import Enum

import numpy as np


class LossKind(str, Enum):
    MSE = "mse"
    MARGIN_MSE = "margin_mse"
    RANKNET = "ranknet"
    KL = "kl"
    LISTNET = "listnet"

    @classmethod
    def parse(cls, value: "str | LossKind") -> "LossKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"marginmse": "margin_mse", "kldiv": "kl", "kl_div": "kl", "kldivergence": "kl"}
        return cls(aliases.get(key, key))


def _prep(t, s):
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 1:
        raise ValueError(f"teacher/student shape mismatch: {t.shape} vs {s.shape}")
    return t, s


def softmax_dist(scores) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax(scores) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def loss_mse(t, s):
    t, s = _prep(t, s)
    diff = s - t
    return float(diff @ diff), 2.0 * diff


def loss_margin_mse(t, s):
    """Sum over ordered pairs d1 != d2 of squared teacher-vs-student margin gaps.

    With e = t - s the pair sum reduces to 2n*sum(e^2) - 2*sum(e)^2, so this
    runs in O(n).
    """
    t, s = _prep(t, s)
    n = t.size
    e = t - s
    se = e.sum()
    loss = 2.0 * n * float(e @ e) - 2.0 * se * se
    return float(loss), -4.0 * (n * e - se)


def loss_ranknet(t, s, pairs: str = "ordered"):
    """Teacher-weighted RankNet: -sum (t1 - t2) * log sigmoid(s1 - s2).

    ``pairs="ordered"`` sums over all ordered pairs d1 != d2. Because
    log sigmoid(x) - log sigmoid(-x) == x, each antisymmetric pair collapses
    and the sum equals -(n*<t,s> - sum(t)*sum(s)), which is what is evaluated.
    ``pairs="preferred"`` keeps only pairs where the teacher prefers d1
    (t1 > t2); that form is bounded below by zero.
    """
    t, s = _prep(t, s)
    n = t.size
    if pairs == "ordered":
        st = t.sum()
        loss = -(n * float(t @ s) - st * s.sum())
        return float(loss), -(n * t - st)
    if pairs != "preferred":
        raise ValueError(f"unknown pair set {pairs!r}")
    w = t[:, None] - t[None, :]
    np.maximum(w, 0.0, out=w)
    x = s[:, None] - s[None, :]
    # -log sigmoid(x) = softplus(-x)
    loss = float((w * np.logaddexp(0.0, -x)).sum())
    # d/dx softplus(-x) = -sigmoid(-x)
    g = w * -0.5 * (1.0 - np.tanh(0.5 * x))
    return loss, g.sum(axis=1) - g.sum(axis=0)


def loss_kl(t, s):
    """KL(student || teacher) over the softmax-normalised candidate scores."""
    t, s = _prep(t, s)
    if t.size == 0:
        return 0.0, s.copy()
    log_p = log_softmax(s)
    log_q = log_softmax(t)
    p = np.exp(log_p)
    g = log_p - log_q
    loss = float(p @ g)
    return max(loss, 0.0), p * (g - loss)


def loss_listnet(t, s):
    """Cross-entropy of the student distribution under the teacher distribution."""
    t, s = _prep(t, s)
    if t.size == 0:
        return 0.0, s.copy()
    q = softmax_dist(t)
    log_p = log_softmax(s)
    return float(-(q @ log_p)), np.exp(log_p) - q


LOSSES = {
    LossKind.MSE: loss_mse,
    LossKind.MARGIN_MSE: loss_margin_mse,
    LossKind.RANKNET: loss_ranknet,
    LossKind.KL: loss_kl,
    LossKind.LISTNET: loss_listnet,
}


def get_loss(kind: "str | LossKind"):
    return LOSSES[LossKind.parse(kind)]
