"""Finite-difference checks of the whole differentiable pipeline, by scope.

Each scope builds a small float64 problem and returns one or more
:class:`~trimodal.autodiff.GradCheckReport`. Scopes: ``tensor`` (every op
on its own), ``fusion``, ``loss``, ``recon`` and ``full`` (the training
objective on a 4-shape micro-batch).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .data import DataConfig, make_batches, synthesize
from .encoders import EncoderConfig, init_params
from .fusion import cqa_embed
from .loss import LossConfig, build_sim_matrix, contrastive_loss
from .reconstruction import PooledPair, reconstruct
from .trainer import TrainConfig, batch_loss

SCOPES = ("tensor", "fusion", "loss", "recon", "full")
DEFAULT_TOL = {"tensor": 1e-5, "fusion": 1e-5, "loss": 1e-4, "recon": 1e-5, "full": 1e-3}

MICRO_DATA = DataConfig(
    train_shapes=4, test_shapes=4, n_points=16, views=3, d_v=6, vocab=20, max_len=8,
    n_categories=2, n_colors=2, n_sizes=2, n_part_counts=2,
)
MICRO_TRAIN = TrainConfig(epochs=1, batch=4, N=4, D=8, hidden=8, precision=64)


def _t(rng, r, c, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=(r, c)), requires_grad=True)


def _projected(op: Callable[..., Tensor], rng) -> Callable[..., Tensor]:
    """Reduce an op's output to a scalar through a fixed random projection."""
    cache: dict = {}

    def f(*args):
        out = op(*args)
        if "w" not in cache:
            cache["w"] = Tensor(rng.normal(size=out.shape))
        return ad.sum_all(ad.mul(out, cache["w"]))

    return f


def op_cases(seed: int = 0) -> dict[str, tuple[Callable, dict[str, Tensor]]]:
    """One small random instance per primitive."""
    rng = np.random.default_rng(seed)
    mask = rng.uniform(size=(4, 5)) > 0.3
    mask[:, 0] = True
    cases = {}

    def case(name, op, **tensors):
        f = _projected(op, rng)
        cases[name] = (lambda f=f, ts=tensors: f(*ts.values()), tensors)

    case("matmul", ad.matmul, a=_t(rng, 3, 4), b=_t(rng, 4, 2))
    case("transpose", ad.transpose, a=_t(rng, 3, 2))
    case("block_matmul", lambda a, b: ad.block_matmul(a, b, 2), a=_t(rng, 6, 4), b=_t(rng, 8, 5))
    case("block_matmul_tn", lambda a, b: ad.block_matmul(a, b, 2, trans_a=True), a=_t(rng, 6, 4), b=_t(rng, 6, 2))
    case("block_matmul_nt", lambda a, b: ad.block_matmul(a, b, 2, trans_b=True), a=_t(rng, 6, 4), b=_t(rng, 4, 4))
    case("linear", ad.linear, x=_t(rng, 5, 3), w=_t(rng, 3, 4), b=_t(rng, 1, 4))
    case("add", ad.add, a=_t(rng, 3, 3), b=_t(rng, 3, 3))
    case("sub", ad.sub, a=_t(rng, 3, 3), b=_t(rng, 3, 3))
    case("mul", ad.mul, a=_t(rng, 3, 3), b=_t(rng, 3, 3))
    case("mul_scalar", ad.mul, a=_t(rng, 3, 3), b=_t(rng, 1, 1))
    case("div_scalar", ad.div, a=_t(rng, 3, 3), b=_t(rng, 1, 1, 0.5, 1.5))
    case("scale", lambda a: ad.scale(a, -1.7), a=_t(rng, 2, 3))
    case("relu", ad.relu, a=_t(rng, 4, 4))
    case("exp", ad.exp, a=_t(rng, 3, 3))
    case("log", ad.log, a=_t(rng, 3, 3, 0.5, 2.0))
    case("softmax_row", lambda a: ad.softmax_axis(a, "row"), a=_t(rng, 3, 4, -3, 3))
    case("softmax_col", lambda a: ad.softmax_axis(a, "col", blocks=2), a=_t(rng, 6, 3, -3, 3))
    case("logsumexp_rows", lambda a: ad.logsumexp_rows(a, mask=mask), a=_t(rng, 4, 5, -3, 3))
    case("concat_cols", lambda a, b: ad.concat_cols([a, b]), a=_t(rng, 2, 2), b=_t(rng, 2, 3))
    case("slice_cols", lambda a: ad.slice_cols(a, 1, 3), a=_t(rng, 3, 4))
    case("max_rows", lambda a: ad.max_rows(a, blocks=2), a=_t(rng, 6, 3))
    case("mean_rows", lambda a: ad.mean_rows(a, blocks=3), a=_t(rng, 6, 3))
    case("sum_all", ad.sum_all, a=_t(rng, 3, 2))
    case("l2_distance", ad.row_l2_distance, a=_t(rng, 3, 4), b=_t(rng, 3, 4, 1.0, 2.0))
    case("cosine", ad.cosine_matrix, a=_t(rng, 3, 4), b=_t(rng, 2, 4))
    return cases


def check_ops(h: float = 1e-5, tol: float = 1e-5, seed: int = 0) -> GradCheckReport:
    report = GradCheckReport(tol=tol)
    for name, (f, tensors) in op_cases(seed).items():
        sub = grad_check(f, tensors, h=h, tol=tol)
        report.max_rel_err[name] = max(sub.max_rel_err.values())
    return report


def _small_params(seed: int, D: int = 8, N: int = 4, M: int = 3):
    cfg = EncoderConfig(n_points=4 * N, N=N, M=M, D=D, hidden=D, vocab=20, d_v=6)
    return cfg, init_params(cfg, seed, dtype=np.float64)


def check_fusion(h: float = 1e-5, tol: float = 1e-5, seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    cfg, params = _small_params(seed)
    blocks = 2
    P = _t(rng, blocks * cfg.N, cfg.D)
    I = _t(rng, blocks * cfg.M, cfg.D)
    # a larger trilinear weight makes the attention visibly non-uniform
    params["fusion.w0"].data *= 4.0
    tensors = {"P": P, "I": I, **params.subset(["fusion."])}
    return grad_check(lambda: ad.sum_all(cqa_embed(P, I, params, blocks)), tensors, h=h, tol=tol)


def check_loss(h: float = 1e-5, tol: float = 1e-4, seed: int = 0, n: int = 4, mode: str = "hn_nce", mirror: str = "pool") -> GradCheckReport:
    rng = np.random.default_rng(seed)
    S, T = _t(rng, n, 3), _t(rng, n, 3)
    tau = Tensor(np.full((1, 1), 0.3), requires_grad=True)
    cfg = LossConfig(beta=0.5, mode=mode, mirror=mirror)
    return grad_check(
        lambda: contrastive_loss(build_sim_matrix(S, T), tau, cfg),
        {"S": S, "T": T, "tau": tau},
        h=h,
        tol=tol,
    )


def check_recon(h: float = 1e-5, tol: float = 1e-5, seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    cfg, params = _small_params(seed)
    pp = PooledPair(_t(rng, 2, cfg.D), _t(rng, 2, cfg.D))
    T = _t(rng, 2, cfg.D)

    def f():
        out = reconstruct(pp, T, params)
        return ad.add(ad.sum_all(out.loss_i2p), ad.sum_all(out.loss_p2i))

    tensors = {"p_bar": pp.p_bar, "i_bar": pp.i_bar, "T": T, **params.subset(["rec."])}
    return grad_check(f, tensors, h=h, tol=tol)


def check_full(h: float = 1e-5, tol: float = 1e-3, seed: int = 0, train_cfg: TrainConfig = MICRO_TRAIN) -> GradCheckReport:
    """Training objective on a 4-shape micro-batch, every parameter tensor."""
    data = synthesize(MICRO_DATA, seed)
    batch = make_batches(data["train"], 4, seed)[0]
    params = init_params(train_cfg.encoder_config(MICRO_DATA), seed, dtype=np.float64, recon=train_cfg.recon_layout)
    return grad_check(lambda: batch_loss(batch, params, train_cfg), dict(params.items()), h=h, tol=tol)


def run_scope(scope: str, h: float = 1e-5, tol: float | None = None, seed: int = 0) -> GradCheckReport:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    tol = DEFAULT_TOL[scope] if tol is None else tol
    fn = {"tensor": check_ops, "fusion": check_fusion, "loss": check_loss, "recon": check_recon, "full": check_full}[scope]
    return fn(h=h, tol=tol, seed=seed)
