"""Small trainable encoders for points, views and captions.

Each modality goes through a shared per-item MLP followed by an adapter
MLP into the common D-dimensional space. Batched entry points stack the
per-shape feature matrices row-wise (``n*N x D`` for points, ``n*M x D``
for views, ``n x D`` for captions).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tensor, linear, matmul, relu

TAU_INIT = 0.07


@dataclass(frozen=True)
class EncoderConfig:
    n_points: int = 256
    d_p: int = 6
    N: int = 32
    M: int = 6
    D: int = 64
    hidden: int = 64
    vocab: int = 64
    d_v: int = 32

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"EncoderConfig.{k} must be positive, got {v}")
        if self.n_points % self.N:
            raise ValueError(f"N={self.N} must divide n_points={self.n_points}")

    @property
    def group_size(self) -> int:
        return self.n_points // self.N

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Ordered name -> Tensor mapping of every trainable tensor."""

    def __init__(self, tensors: dict[str, Tensor], cfg: EncoderConfig, recon: str = "tri"):
        self.tensors = tensors
        self.cfg = cfg
        self.recon = recon

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self):
        return self.tensors.values()

    @property
    def dtype(self):
        return self.tensors["tau"].dtype

    @property
    def tau(self) -> Tensor:
        return self.tensors["tau"]

    def subset(self, prefixes: Sequence[str]) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if k.startswith(tuple(prefixes))}

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self, dtype=None) -> "ModelParams":
        out = {}
        for k, t in self.tensors.items():
            data = t.data.astype(dtype) if dtype is not None else t.data.copy()
            out[k] = Tensor(data, requires_grad=t.requires_grad, name=k)
        return ModelParams(out, self.cfg, self.recon)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape or (fan_in, fan_out))


def _add_mlp(spec: list, prefix: str, d_in: int, d_hidden: int, d_out: int) -> None:
    spec.append((f"{prefix}.W1", d_in, d_hidden))
    spec.append((f"{prefix}.b1", None, d_hidden))
    spec.append((f"{prefix}.W2", d_hidden, d_out))
    spec.append((f"{prefix}.b2", None, d_out))


def param_layout(cfg: EncoderConfig, recon: str = "tri") -> list[tuple[str, int | None, int]]:
    """(name, fan_in, width) for every tensor; fan_in None marks a bias row."""
    if recon not in ("tri", "bi"):
        raise ValueError(f"recon layout must be 'tri' or 'bi', got {recon!r}")
    D, H = cfg.D, cfg.hidden
    spec: list = []
    _add_mlp(spec, "pts.mlp", cfg.d_p * cfg.group_size, H, D)
    _add_mlp(spec, "pts.adapter", D, H, D)
    _add_mlp(spec, "img.mlp", cfg.d_v, H, D)
    _add_mlp(spec, "img.adapter", D, H, D)
    spec.append(("txt.embed", cfg.vocab, D))
    _add_mlp(spec, "txt.adapter", D, H, D)
    spec.append(("fusion.w0", 3 * D, 1))
    _add_mlp(spec, "fusion.pool", 4 * D, H, D)
    rec_in = 2 * D if recon == "tri" else D
    _add_mlp(spec, "rec.p2i", rec_in, 2 * D, D)
    _add_mlp(spec, "rec.i2p", rec_in, 2 * D, D)
    _add_mlp(spec, "baseline.fuse", 2 * D, H, D)
    _add_mlp(spec, "head.img", D, H, D)
    _add_mlp(spec, "head.pts", D, H, D)
    return spec


def init_params(cfg: EncoderConfig, seed: int, dtype=np.float32, recon: str = "tri") -> ModelParams:
    """Glorot-uniform weights, zero biases, temperature at 0.07.

    ``recon="bi"`` sizes the reconstruction MLPs for single-modality
    input (no text concatenation).
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, fan_in, width in param_layout(cfg, recon):
        if fan_in is None:
            data = np.zeros((1, width))
        elif name == "fusion.w0":
            data = _glorot(rng, 3 * cfg.D, 1, shape=(1, 3 * cfg.D))
        else:
            data = _glorot(rng, fan_in, width)
        tensors[name] = Tensor(data, requires_grad=True, name=name, dtype=dtype)
    tensors["tau"] = Tensor(np.full((1, 1), TAU_INIT), requires_grad=True, name="tau", dtype=dtype)
    return ModelParams(tensors, cfg, recon)


def mlp(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """Two-layer perceptron ``W2 relu(W1 x + b1) + b2`` applied row-wise."""
    h = relu(linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


# ------------------------------------------------------------------ points


def encode_points_batch(points: np.ndarray, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    """``(n, n_p, d_p)`` clouds -> stacked ``n*N x D`` point features."""
    points = np.asarray(points)
    if points.ndim == 2:
        points = points[None]
    n, n_p, d_p = points.shape
    if d_p != cfg.d_p:
        raise ValueError(f"point clouds carry {d_p} channels, expected {cfg.d_p}")
    if n_p % cfg.N:
        raise ValueError(f"n_points={n_p} is not divisible by N={cfg.N}")
    if n_p < cfg.N:
        raise ValueError(f"need at least N={cfg.N} points, got {n_p}")
    if n_p != cfg.n_points:
        raise ValueError(f"point clouds have {n_p} points, encoder expects {cfg.n_points}")
    groups = Tensor(points.reshape(n * cfg.N, -1), dtype=params.dtype)
    return mlp(mlp(groups, params, "pts.mlp"), params, "pts.adapter")


def encode_points(pc: np.ndarray, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    return encode_points_batch(np.asarray(pc)[None], params, cfg)


# ------------------------------------------------------------------- views


def encode_views_batch(views: np.ndarray, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    """``(n, M, d_v)`` view descriptors -> stacked ``n*M x D`` image features."""
    views = np.asarray(views)
    if views.ndim == 2:
        views = views[None]
    n, M, d_v = views.shape
    if M != cfg.M:
        raise ValueError(f"got {M} views per shape, expected M={cfg.M}")
    if d_v != cfg.d_v:
        raise ValueError(f"view descriptors have width {d_v}, expected {cfg.d_v}")
    x = Tensor(views.reshape(n * M, d_v), dtype=params.dtype)
    return mlp(mlp(x, params, "img.mlp"), params, "img.adapter")


def encode_views(v: np.ndarray, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    return encode_views_batch(np.asarray(v)[None], params, cfg)


# -------------------------------------------------------------------- text


def token_histogram(captions: Sequence[Sequence[int]], vocab: int, dtype=np.float64) -> np.ndarray:
    """Row i holds token frequencies of caption i divided by its length."""
    out = np.zeros((len(captions), vocab), dtype=dtype)
    for i, toks in enumerate(captions):
        toks = np.asarray(toks, dtype=np.int64)
        if toks.size == 0:
            raise ValueError(f"caption {i} is empty")
        if toks.min() < 0 or toks.max() >= vocab:
            raise ValueError(f"caption {i} has a token id outside the vocabulary of {vocab}")
        np.add.at(out[i], toks, 1.0)
        out[i] /= toks.size
    return out


def encode_text_batch(captions: Sequence[Sequence[int]], params: ModelParams, cfg: EncoderConfig) -> Tensor:
    """Mean of token embeddings per caption, then the text adapter."""
    hist = Tensor(token_histogram(captions, cfg.vocab, params.dtype))
    return mlp(matmul(hist, params["txt.embed"]), params, "txt.adapter")


def encode_text(tokens: Sequence[int], params: ModelParams, cfg: EncoderConfig) -> Tensor:
    return encode_text_batch([tokens], params, cfg)
