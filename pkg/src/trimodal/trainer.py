"""Training loop: encoders -> reconstruction -> fusion -> contrastive loss.

A whole batch goes through the graph at once: point groups and views of
all shapes are stacked row-wise and the per-shape ops (pooling, softmax
over points, attention products) work block by block.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import fusion
from .autodiff import Graph, Tensor, max_rows, sum_all
from .data import Batch, DataConfig, ShapeDataset, make_batches, synthesize
from .encoders import (
    EncoderConfig,
    ModelParams,
    encode_points_batch,
    encode_text_batch,
    encode_views_batch,
    init_params,
    mlp,
)
from .loss import LossConfig, LossFlags, build_sim_matrix, clamp_tau, contrastive_loss, total_loss
from .metrics import DIRECTIONS, METRICS, evaluate
from .reconstruction import pool_features, reconstruct

log = logging.getLogger(__name__)

MODALITIES = ("both", "image", "point")
RECON = ("both", "off", "i2p", "p2i", "bi")
FUSION = ("cqa", "mlp")
CKPT_MAGIC = b"TMRC1\0\0\0"
CKPT_VERSION = "TMRC1"


class ConfigError(ValueError):
    """Invalid flag combination, detected before any compute."""


class NumericError(FloatingPointError):
    """Non-finite loss during training."""


class IncompatibleError(ValueError):
    """Checkpoint and dataset disagree on model dimensions."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    horizon: int | None = None  # schedule length in steps; None = all steps
    seed: int = 0
    modalities: str = "both"
    recon: str = "both"
    fusion: str = "cqa"
    loss: str = "hn_nce"
    hn_mirror: str = "pool"
    beta: float = 0.5
    tau_floor: float = 1e-3
    precision: int = 32
    eval_every: int = 10
    N: int = 32
    D: int = 64
    hidden: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch < 2:
            raise ConfigError("batch must be >= 2")
        for name, allowed in (("modalities", MODALITIES), ("recon", RECON), ("fusion", FUSION)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.modalities != "both" and self.recon != "off":
            raise ConfigError(
                f"recon={self.recon} needs both visual modalities; use --recon off with modalities={self.modalities}"
            )
        try:
            self.loss_config
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(beta=self.beta, tau_floor=self.tau_floor, mode=self.loss, mirror=self.hn_mirror)

    @property
    def loss_flags(self) -> LossFlags:
        return LossFlags(
            i2p=self.recon in ("i2p", "both", "bi"),
            p2i=self.recon in ("p2i", "both", "bi"),
        )

    @property
    def recon_layout(self) -> str:
        return "bi" if self.recon == "bi" else "tri"

    def encoder_config(self, data_cfg: DataConfig) -> EncoderConfig:
        return EncoderConfig(
            n_points=data_cfg.n_points, M=data_cfg.views, D=self.D, hidden=self.hidden,
            vocab=data_cfg.vocab, d_v=data_cfg.d_v, N=self.N,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def active_prefixes(cfg: TrainConfig) -> list[str]:
    """Parameter-name prefixes that the configured arm actually uses."""
    out = ["txt.", "tau"]
    if cfg.modalities in ("both", "point"):
        out.append("pts.")
    if cfg.modalities in ("both", "image"):
        out.append("img.")
    if cfg.modalities == "both":
        out.append("fusion." if cfg.fusion == "cqa" else "baseline.")
    else:
        out.append("head.img." if cfg.modalities == "image" else "head.pts.")
    flags = cfg.loss_flags
    if flags.p2i:
        out.append("rec.p2i.")
    if flags.i2p:
        out.append("rec.i2p.")
    return out


def trainable_names(params: ModelParams, cfg: TrainConfig) -> list[str]:
    return list(params.subset(active_prefixes(cfg)))


# ------------------------------------------------------------------ forward


@dataclass
class ForwardOutput:
    shapes: Tensor  # n x D
    texts: Tensor  # n x D
    loss_i2p: Tensor | float
    loss_p2i: Tensor | float


def embed_shapes(points, views, params: ModelParams, cfg: TrainConfig):
    """Shape embeddings for stacked raw inputs, plus the per-modality features."""
    ecfg = params.cfg
    n = len(points) if cfg.modalities != "image" else len(views)
    P = encode_points_batch(points, params, ecfg) if cfg.modalities != "image" else None
    I = encode_views_batch(views, params, ecfg) if cfg.modalities != "point" else None
    if cfg.modalities == "image":
        S = mlp(max_rows(I, n), params, "head.img")
    elif cfg.modalities == "point":
        S = mlp(max_rows(P, n), params, "head.pts")
    elif cfg.fusion == "cqa":
        S = fusion.cqa_embed(P, I, params, n)
    else:
        S = fusion.fuse_mlp_baseline(P, I, params, n)
    return S, P, I


def forward_batch(batch: Batch, params: ModelParams, cfg: TrainConfig) -> ForwardOutput:
    n = len(batch)
    S, P, I = embed_shapes(batch.points, batch.views, params, cfg)
    T = encode_text_batch(batch.captions, params, params.cfg)
    l_i2p: Tensor | float = 0.0
    l_p2i: Tensor | float = 0.0
    flags = cfg.loss_flags
    if (flags.i2p or flags.p2i) and P is not None and I is not None:
        rec = reconstruct(pool_features(P, I, n), T, params)
        if flags.i2p:
            l_i2p = sum_all(rec.loss_i2p)
        if flags.p2i:
            l_p2i = sum_all(rec.loss_p2i)
    return ForwardOutput(S, T, l_i2p, l_p2i)


def batch_loss(batch: Batch, params: ModelParams, cfg: TrainConfig) -> Tensor:
    out = forward_batch(batch, params, cfg)
    l_ret = contrastive_loss(build_sim_matrix(out.shapes, out.texts), params.tau, cfg.loss_config)
    return total_loss(l_ret, out.loss_i2p, out.loss_p2i, cfg.loss_flags)


class Model:
    """Parameters plus the arm configuration; embeds whole splits for evaluation."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg

    def embed(self, ds: ShapeDataset, chunk: int = 64):
        points, views, captions = ds.arrays()
        shapes = []
        for s in range(0, len(ds), chunk):
            S, _, _ = embed_shapes(points[s : s + chunk], views[s : s + chunk], self.params, self.cfg)
            shapes.append(S.data)
        flat = [c for caps in captions for c in caps]
        owner = np.repeat(np.arange(len(ds)), [len(c) for c in captions])
        texts = [
            encode_text_batch(flat[s : s + 256], self.params, self.params.cfg).data
            for s in range(0, len(flat), 256)
        ]
        return np.concatenate(shapes), np.concatenate(texts), owner

    def embed_text(self, tokens: Sequence[int]) -> np.ndarray:
        return encode_text_batch([tokens], self.params, self.params.cfg).data[0]


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_lr(step: int, total: int, base: float) -> float:
    """Cosine annealing from ``base`` at step 0 to 0 at ``total``."""
    if total <= 0:
        return base
    step = min(max(step, 0), total)
    return max(0.0, 0.5 * base * (1.0 + math.cos(math.pi * step / total)))


def adamw_step(
    params: ModelParams,
    names: Iterable[str],
    state: AdamState,
    lr_t: float,
    cfg: TrainConfig,
) -> None:
    """One AdamW update with decoupled decay, in place. ``tau`` is never decayed."""
    names = list(names)
    for name in names:
        if params[name].grad is None:
            raise ValueError(f"missing gradient for trainable tensor {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name in names:
        p = params[name]
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if name != "tau":
            update = update + cfg.weight_decay * p.data
        p.data -= (lr_t * update).astype(p.data.dtype, copy=False)
    clamp_tau(params.tau, cfg.tau_floor)


# ------------------------------------------------------------------ training


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    cfg: TrainConfig
    log: list[dict]
    final_metrics: dict | None = None
    best_metrics: dict | None = None


def _check_compatible(cfg: TrainConfig, ds: ShapeDataset) -> EncoderConfig:
    try:
        return cfg.encoder_config(ds.cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train(
    cfg: TrainConfig,
    train_ds: ShapeDataset,
    test_ds: ShapeDataset | None = None,
    out_dir=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs; evaluate every ``eval_every`` epochs if a test split is given.

    With ``out_dir``, writes ``final.ckpt``, ``best.ckpt`` (by mean RR@1) and
    ``log.jsonl``.
    """
    ecfg = _check_compatible(cfg, train_ds)
    if len(train_ds) < cfg.batch:
        raise ConfigError(f"dataset of {len(train_ds)} shapes is smaller than batch {cfg.batch}")
    params = init_params(ecfg, cfg.seed, dtype=cfg.dtype, recon=cfg.recon_layout)
    names = trainable_names(params, cfg)
    state = AdamState()
    steps_per_epoch = len(train_ds) // cfg.batch
    total = cfg.horizon or cfg.epochs * steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "log.jsonl").write_text("")
    records: list[dict] = []
    best_score = -1.0
    best_metrics = final_metrics = None
    model = Model(params, cfg)

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in make_batches(train_ds, cfg.batch, epoch_seed(cfg.seed, epoch)):
            lr_t = cosine_lr(state.step, total, cfg.lr)
            params.zero_grad()
            try:
                with Graph() as g:
                    loss = batch_loss(batch, params, cfg)
                value = loss.item()
            except FloatingPointError as exc:
                raise NumericError(f"{exc} at step {state.step} (batch shape ids {batch.ids.tolist()})") from exc
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite loss {value} at step {state.step} (batch shape ids {batch.ids.tolist()})"
                )
            g.backward(loss)
            adamw_step(params, names, state, lr_t, cfg)
            losses.append(value)
        entry = {"epoch": epoch, "step": state.step, "loss": float(np.mean(losses)),
                 "lr": cosine_lr(state.step, total, cfg.lr), "tau": params.tau.item()}
        is_eval = test_ds is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs)
        if is_eval:
            metrics = evaluate(model, test_ds)
            entry["metrics"] = metrics
            score = 0.5 * (metrics["S2T"]["RR@1"] + metrics["T2S"]["RR@1"])
            if score > best_score:
                best_score, best_metrics = score, metrics
                if out is not None:
                    save_checkpoint(out / "best.ckpt", params, state, cfg)
            if epoch == cfg.epochs:
                final_metrics = metrics
        records.append(entry)
        if out is not None:
            with open(out / "log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(entry)
        log.debug("epoch %d loss %.4f", epoch, entry["loss"])

    if out is not None:
        save_checkpoint(out / "final.ckpt", params, state, cfg)
    return TrainResult(params, state, cfg, records, final_metrics, best_metrics)


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ModelParams, state: AdamState, cfg: TrainConfig) -> None:
    dtype = "<f4" if params.dtype == np.float32 else "<f8"
    entries, chunks = [], []
    for group, source in (("param", {k: t.data for k, t in params.items()}), ("m", state.m), ("v", state.v)):
        for name in params.names():
            if name not in source:
                continue
            arr = source[name]
            entries.append({"group": group, "name": name, "rows": arr.shape[0], "cols": arr.shape[1]})
            chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    header = {
        "version": CKPT_VERSION,
        "config": cfg.to_dict(),
        "encoder": params.cfg.to_dict(),
        "recon_layout": params.recon,
        "step": state.step,
        "tau": params.tau.item(),
        "dtype": dtype,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob + b"".join(chunks))


def load_checkpoint(path) -> tuple[ModelParams, AdamState, TrainConfig]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a {CKPT_VERSION} checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    cfg = TrainConfig.from_dict(header["config"])
    ecfg = EncoderConfig(**header["encoder"])
    dt = np.dtype(header["dtype"])
    native = np.float32 if dt.itemsize == 4 else np.float64
    params = init_params(ecfg, 0, dtype=native, recon=header["recon_layout"])
    state = AdamState(step=header["step"])
    pos = 12 + hlen
    seen = set()
    for e in header["tensors"]:
        count = e["rows"] * e["cols"]
        if pos + count * dt.itemsize > len(raw):
            raise ValueError(f"{path}: truncated at tensor {e['name']}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(e["rows"], e["cols"]).astype(native)
        pos += count * dt.itemsize
        if e["group"] == "param":
            if e["name"] not in params or params[e["name"]].shape != arr.shape:
                raise ValueError(f"{path}: unexpected parameter {e['name']} {arr.shape}")
            params[e["name"]].data = arr
            seen.add(e["name"])
        else:
            getattr(state, e["group"])[e["name"]] = arr
    if seen != set(params.names()):
        raise ValueError(f"{path}: parameter set mismatch, missing {sorted(set(params.names()) - seen)}")
    return params, state, cfg


def check_dataset_compat(params: ModelParams, ds: ShapeDataset) -> None:
    e, d = params.cfg, ds.cfg
    mismatches = [
        f"{k}: checkpoint {a} vs dataset {b}"
        for k, a, b in (("M", e.M, d.views), ("vocab", e.vocab, d.vocab), ("d_v", e.d_v, d.d_v), ("n_points", e.n_points, d.n_points))
        if a != b
    ]
    if mismatches:
        raise IncompatibleError("checkpoint/dataset incompatible: " + "; ".join(mismatches))


# ------------------------------------------------------------------ ablation

_DATA_KEYS = {f.name for f in fields(DataConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class ArmResult:
    name: str
    median: dict
    per_seed: list[dict]


def parse_grid(grid) -> list[dict]:
    """Accept ``{"arms": [...]}``, a bare list of arms, or ``{"axes": {key: [values]}}``."""
    if isinstance(grid, dict) and "axes" in grid:
        keys = list(grid["axes"])
        arms = [dict(zip(keys, combo)) for combo in itertools.product(*grid["axes"].values())]
    else:
        arms = grid["arms"] if isinstance(grid, dict) else list(grid)
    out = []
    for arm in arms:
        arm = dict(arm)
        name = arm.pop("name", None) or ",".join(f"{k}={v}" for k, v in arm.items()) or "default"
        unknown = set(arm) - _DATA_KEYS - _TRAIN_KEYS - {"seed"}
        if unknown:
            raise ConfigError(f"arm {name!r}: unknown keys {sorted(unknown)}")
        out.append({"name": name, **arm})
    return out


def median_table(tables: Sequence[dict]) -> dict:
    return {d: {m: float(np.median([t[d][m] for t in tables])) for m in METRICS} for d in DIRECTIONS}


def ablate(
    grid,
    base: TrainConfig = TrainConfig(),
    data_cfg: DataConfig = DataConfig(),
    data_seed: int = 0,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    splits: dict | None = None,
    on_run: Callable[[str, int, dict], None] | None = None,
) -> list[ArmResult]:
    """Train every arm for every seed; report the per-metric median over seeds.

    Arm keys naming DataConfig fields (e.g. ``views``) regenerate the data.
    """
    arms = parse_grid(grid)
    cfgs = []
    for arm in arms:
        tkeys = {k: v for k, v in arm.items() if k in _TRAIN_KEYS and k != "seed"}
        dkeys = {k: v for k, v in arm.items() if k in _DATA_KEYS}
        cfgs.append((arm["name"], replace(base, **tkeys), replace(data_cfg, **dkeys) if dkeys else None))
    cache: dict = {}
    results = []
    for name, tcfg, dcfg in cfgs:
        if dcfg is None and splits is not None:
            data = splits
        else:
            dcfg = dcfg or data_cfg
            if dcfg not in cache:
                cache[dcfg] = synthesize(dcfg, data_seed)
            data = cache[dcfg]
        tables = []
        for s in seeds:
            res = train(replace(tcfg, seed=s, eval_every=tcfg.epochs), data["train"], data["test"])
            tables.append(res.final_metrics)
            if on_run is not None:
                on_run(name, s, res.final_metrics)
        results.append(ArmResult(name, median_table(tables), tables))
    return results
