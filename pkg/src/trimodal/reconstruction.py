"""Text-guided reconstruction between pooled point and image features.

The point-to-image MLP predicts the pooled image feature from
``[pooled points; text]`` and the image-to-point MLP does the reverse.
Text is only ever an input here; nothing reconstructs it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import DimensionError, Tensor, concat_cols, mean_rows, row_l2_distance
from .encoders import ModelParams, mlp


@dataclass
class PooledPair:
    p_bar: Tensor
    i_bar: Tensor


@dataclass
class ReconOutput:
    i_hat: Tensor
    p_hat: Tensor
    loss_i2p: Tensor  # ||p_bar - p_hat||, one row per shape
    loss_p2i: Tensor  # ||i_bar - i_hat||


def pool_features(P: Tensor, I: Tensor, blocks: int = 1) -> PooledPair:
    """Mean-pool the point and view rows of each of ``blocks`` shapes."""
    return PooledPair(mean_rows(P, blocks), mean_rows(I, blocks))


def reconstruct(pp: PooledPair, T: Tensor, params: ModelParams) -> ReconOutput:
    """Cross-reconstruct the pooled features and measure plain L2 errors.

    With bi-reconstruction parameters (``params.recon == "bi"``) the text
    row is left out of the MLP inputs.
    """
    if T.shape != pp.p_bar.shape or pp.i_bar.shape != pp.p_bar.shape:
        raise DimensionError(
            f"reconstruct: p_bar {pp.p_bar.shape}, i_bar {pp.i_bar.shape}, T {T.shape}"
        )
    if params.recon == "bi":
        src_p, src_i = pp.p_bar, pp.i_bar
    else:
        src_p, src_i = concat_cols([pp.p_bar, T]), concat_cols([pp.i_bar, T])
    i_hat = mlp(src_p, params, "rec.p2i")
    p_hat = mlp(src_i, params, "rec.i2p")
    return ReconOutput(
        i_hat=i_hat,
        p_hat=p_hat,
        loss_i2p=row_l2_distance(pp.p_bar, p_hat),
        loss_p2i=row_l2_distance(pp.i_bar, i_hat),
    )
