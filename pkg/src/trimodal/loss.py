"""Hard-negative weighted contrastive loss between shapes and captions.

Negative j of anchor i gets the weight

    w[i, j] = (n - 1) * exp(beta * sim[i, j] / tau) / sum_{k != i} exp(beta * sim[i, k] / tau)

so the off-diagonal weights of every anchor average to one, and
``beta = 0`` gives plain InfoNCE. All exponentials are taken in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    cosine_matrix,
    div,
    exp,
    logsumexp_rows,
    matmul,
    mul,
    scale,
    sub,
    sum_all,
    transpose,
)

MODES = ("hn_nce", "info_nce")
MIRRORS = ("pool", "literal")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.5
    tau_floor: float = 1e-3
    mode: str = "hn_nce"
    mirror: str = "pool"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.tau_floor <= 0:
            raise ValueError(f"tau_floor must be > 0, got {self.tau_floor}")
        if self.mode not in MODES:
            raise ValueError(f"loss mode must be one of {MODES}, got {self.mode!r}")
        if self.mirror not in MIRRORS:
            raise ValueError(f"hn mirror must be one of {MIRRORS}, got {self.mirror!r}")


@dataclass
class SimMatrix:
    """``sim[i, j]`` is the cosine similarity of shape i and caption j."""

    sim: Tensor

    @property
    def n(self) -> int:
        return self.sim.rows


def build_sim_matrix(shapes: Tensor, texts: Tensor) -> SimMatrix:
    if shapes.rows != texts.rows:
        raise DimensionError(f"{shapes.rows} shape embeddings vs {texts.rows} text embeddings")
    return SimMatrix(cosine_matrix(shapes, texts))


def _as_tensor(tau, like: Tensor) -> Tensor:
    return tau if isinstance(tau, Tensor) else Tensor(np.full((1, 1), tau, dtype=like.dtype))


def _off_diagonal(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


def _log_weights(z: Tensor, beta: float) -> Tensor:
    """Row-normalized log hard-negative weights of logits ``z = sim / tau``.

    Diagonal entries are meaningless and must be masked by the caller.
    """
    n = z.rows
    bz = scale(z, beta)
    lse = logsumexp_rows(bz, mask=_off_diagonal(n))
    spread = matmul(lse, Tensor(np.ones((1, n), dtype=z.dtype)))
    return add(sub(bz, spread), float(np.log(n - 1)))


def hn_weights(sm: SimMatrix, beta: float, tau, direction: str = "s2t") -> Tensor:
    """Hard-negative weights with a zero diagonal.

    ``s2t``: entry [i, j] weights caption j as a negative for shape i
    (rows normalized). ``t2s``: entry [j, i] weights shape j as a negative
    for caption i (columns normalized).
    """
    n = sm.n
    if n < 2:
        raise ValueError("hard-negative weights need a batch of at least 2")
    z = div(sm.sim, _as_tensor(tau, sm.sim))
    off = Tensor(_off_diagonal(n).astype(z.dtype))
    if direction == "s2t":
        return mul(exp(_log_weights(z, beta)), off)
    if direction == "t2s":
        return transpose(mul(exp(_log_weights(transpose(z), beta)), off))
    raise ValueError(f"direction must be 's2t' or 't2s', got {direction!r}")


def _anchor_term(logits: Tensor, z_rows: Tensor) -> Tensor:
    """sum_i [logsumexp_j logits[i, j] - z_rows[i, i]]."""
    eye = Tensor(np.eye(logits.rows, dtype=logits.dtype))
    return sub(sum_all(logsumexp_rows(logits)), sum_all(mul(z_rows, eye)))


def contrastive_loss(sm: SimMatrix, tau: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Bi-directional shape<->text loss summed over the batch.

    Each anchor contributes ``-log(e^{z_ii} / (e^{z_ii} + sum_{j!=i} w_ij e^{z_ij}))``,
    computed as a log-sum-exp of ``z_ij + log w_ij`` with ``log w_ii = 0``.
    """
    n = sm.n
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    z = div(sm.sim, _as_tensor(tau, sm.sim))
    zt = transpose(z)
    if cfg.mode == "info_nce":
        return add(_anchor_term(z, z), _anchor_term(zt, zt))

    off = Tensor(_off_diagonal(n).astype(z.dtype))
    logits_s2t = add(z, mul(_log_weights(z, cfg.beta), off))
    if cfg.mirror == "pool":
        logits_t2s = add(zt, mul(_log_weights(zt, cfg.beta), off))
    else:
        # weights of the second term read straight from the shape-anchored matrix
        logits_t2s = transpose(logits_s2t)
    return add(_anchor_term(logits_s2t, z), _anchor_term(logits_t2s, zt))


@dataclass(frozen=True)
class LossFlags:
    i2p: bool = True
    p2i: bool = True


def total_loss(l_ret, l_i2p, l_p2i, flags: LossFlags = LossFlags()):
    """Unweighted sum of the retrieval loss and the enabled reconstruction terms."""
    total = l_ret
    for term, on in ((l_i2p, flags.i2p), (l_p2i, flags.p2i)):
        if not on:
            continue
        if isinstance(total, Tensor) or isinstance(term, Tensor):
            total = add(total, term) if isinstance(total, Tensor) else add(term, total)
        else:
            total = total + term
    return total


def clamp_tau(tau: Tensor, floor: float) -> None:
    np.maximum(tau.data, floor, out=tau.data)
