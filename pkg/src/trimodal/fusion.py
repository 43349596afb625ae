"""Context-query attention fusion of point and view features.

For one shape with point features P (N x D) and view features I (M x D):

* a trilinear score grid s[n, m] = w0 . [p_n; i_m; p_n * i_m],
* its row softmax s_r (over views) and column softmax s_c (over points),
* the aggregates A = s_r I and B = s_r (s_c^T P),
* a row-wise MLP over [P; A; P*A; P*B] followed by a max over rows.

All functions accept row-stacked batches via ``blocks``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    block_matmul,
    concat_cols,
    matmul,
    max_rows,
    mul,
    slice_cols,
    softmax_axis,
    transpose,
)
from .encoders import ModelParams, mlp


@dataclass
class SimilarityGrid:
    s: Tensor
    s_r: Tensor
    s_c: Tensor
    blocks: int = 1


def _ones(rows: int, cols: int, like: Tensor) -> Tensor:
    return Tensor(np.ones((rows, cols), dtype=like.dtype))


def trilinear_scores(P: Tensor, I: Tensor, w0: Tensor, blocks: int = 1) -> SimilarityGrid:
    """Score every (point feature, view feature) pair of each shape.

    Uses the split ``s = (P w_p) 1^T + 1 (I w_i)^T + (P * w_pi) I^T`` of the
    weight row ``w0 = [w_p; w_i; w_pi]`` instead of materializing the
    ``3D``-wide pair features.
    """
    D = P.cols
    if I.cols != D:
        raise DimensionError(f"trilinear_scores: P {P.shape} and I {I.shape} widths differ")
    if w0.shape != (1, 3 * D):
        raise DimensionError(f"trilinear_scores: w0 must be 1x{3 * D}, got {w0.shape}")
    if P.rows % blocks or I.rows % blocks:
        raise DimensionError(f"trilinear_scores: {P.rows}/{I.rows} rows vs {blocks} blocks")
    M = I.rows // blocks
    w_p = slice_cols(w0, 0, D)
    w_i = slice_cols(w0, D, 2 * D)
    w_pi = slice_cols(w0, 2 * D, 3 * D)
    ones_col = _ones(P.rows, 1, P)

    point_term = matmul(matmul(P, transpose(w_p)), _ones(1, M, P))
    view_term = block_matmul(ones_col, matmul(I, transpose(w_i)), blocks, trans_b=True)
    pair_term = block_matmul(mul(P, matmul(ones_col, w_pi)), I, blocks, trans_b=True)
    s = add(add(point_term, view_term), pair_term)
    return SimilarityGrid(
        s=s,
        s_r=softmax_axis(s, "row"),
        s_c=softmax_axis(s, "col", blocks=blocks),
        blocks=blocks,
    )


def attention_aggregate(g: SimilarityGrid, P: Tensor, I: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``A = s_r I`` and ``B = s_r (s_c^T P)``, both row-aligned with P."""
    if g.s.rows != P.rows or g.s.cols * g.blocks != I.rows:
        raise DimensionError(f"attention_aggregate: grid {g.s.shape} vs P {P.shape}, I {I.shape}")
    A = block_matmul(g.s_r, I, g.blocks)
    views_from_points = block_matmul(g.s_c, P, g.blocks, trans_a=True)
    B = block_matmul(g.s_r, views_from_points, g.blocks)
    return A, B


def fuse(P: Tensor, A: Tensor, B: Tensor, params: ModelParams, blocks: int = 1) -> Tensor:
    """Row-wise MLP over ``[P; A; P*A; P*B]``, then max over each shape's rows."""
    if not (P.shape == A.shape == B.shape):
        raise DimensionError(f"fuse: P {P.shape}, A {A.shape}, B {B.shape}")
    x = concat_cols([P, A, mul(P, A), mul(P, B)])
    return max_rows(mlp(x, params, "fusion.pool"), blocks)


def fuse_mlp_baseline(P: Tensor, I: Tensor, params: ModelParams, blocks: int = 1) -> Tensor:
    """Concatenate max-pooled point and view features and run one MLP."""
    x = concat_cols([max_rows(P, blocks), max_rows(I, blocks)])
    return mlp(x, params, "baseline.fuse")


def cqa_embed(P: Tensor, I: Tensor, params: ModelParams, blocks: int = 1) -> Tensor:
    grid = trilinear_scores(P, I, params["fusion.w0"], blocks)
    A, B = attention_aggregate(grid, P, I)
    return fuse(P, A, B, params, blocks)
