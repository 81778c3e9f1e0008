"""Local feature aggregation: spatial encoding, attentive pooling, residual blocks.

Widths inside a block with nominal output ``d_out`` (``h = d_out // 2``)::

    features (d_in) --pre--> h --unit--> ... --unit--> d_out --main--> 2*d_out
          \\--------------------------skip-----------------------> 2*d_out
    output = leaky_relu(main + skip)

Each unit concatenates an ``h``-wide spatial encoding with the ``h``-wide
neighbor features, pools the ``2h``-wide result over the K neighbors and maps
it to ``h`` (or to ``d_out`` on the last unit).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError, ShapeError
from .neighbors import NeighborIndex, nearest_one
from .nn import MlpParams, init_mlp, shared_mlp
from .tensor import Tensor

# raw geometric terms per spatial-encoding variant
LOCSE_VARIANTS = {
    "none": (),
    "center_only": ("center",),
    "neighbor_only": ("neighbor",),
    "center_neighbor": ("center", "neighbor"),
    "center_neighbor_dist": ("center", "neighbor", "dist"),
    "center_neighbor_rel": ("center", "neighbor", "rel"),
    "full": ("center", "neighbor", "rel", "dist"),
}
_TERM_WIDTH = {"center": 3, "neighbor": 3, "rel": 3, "dist": 1}
POOLING_MODES = ("attentive", "max", "mean", "sum")


@dataclass(frozen=True)
class LocSEConfig:
    variant: str = "full"
    k: int = 16

    def __post_init__(self):
        if self.variant not in LOCSE_VARIANTS:
            raise ConfigError(f"unknown spatial-encoding variant {self.variant!r}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")

    @property
    def raw_width(self) -> int:
        return sum(_TERM_WIDTH[t] for t in LOCSE_VARIANTS[self.variant])


@dataclass(frozen=True)
class BlockConfig:
    units: int = 2
    pooling: str = "attentive"
    locse: LocSEConfig = field(default_factory=LocSEConfig)
    d_out: int = 16

    def __post_init__(self):
        if self.units not in (1, 2, 3):
            raise ConfigError(f"units must be 1, 2 or 3, got {self.units}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")
        if self.d_out < 2 or self.d_out % 2:
            raise ConfigError(f"d_out must be an even number >= 2, got {self.d_out}")


# ---------------------------------------------------------------------------
# spatial encoding


def raw_position_encoding(center, neighbors, cfg: LocSEConfig) -> Tensor:
    """Concatenated geometric terms, Q x K x raw_width, before any MLP."""
    center, neighbors = T.as_tensor(center), T.as_tensor(neighbors)
    if center.ndim != 2 or neighbors.ndim != 3 or neighbors.shape[0] != center.shape[0] \
            or center.shape[1] != 3 or neighbors.shape[2] != 3:
        raise ShapeError(f"center {center.shape} / neighbors {neighbors.shape} mismatch")
    q, k, _ = neighbors.shape
    tiled = T.broadcast_to(T.reshape(center, (q, 1, 3)), (q, k, 3))
    rel = None
    parts = []
    for term in LOCSE_VARIANTS[cfg.variant]:
        if term == "center":
            parts.append(tiled)
        elif term == "neighbor":
            parts.append(neighbors)
        else:
            if rel is None:
                rel = T.sub(tiled, neighbors)
            parts.append(rel if term == "rel" else T.norm(rel, axis=-1, keepdims=True))
    if not parts:
        raise ConfigError("variant 'none' has no position encoding")
    return T.concat(parts, axis=-1)


def relative_position_encoding(center, neighbors, cfg: LocSEConfig, params: MlpParams) -> Tensor:
    if params.d_in != cfg.raw_width:
        raise ConfigError(
            f"encoding MLP expects {params.d_in} inputs but variant {cfg.variant!r} "
            f"produces {cfg.raw_width}"
        )
    return shared_mlp(raw_position_encoding(center, neighbors, cfg), params)


def neighborhood_geometry(positions, idx: NeighborIndex, cfg: LocSEConfig) -> Tensor:
    """Raw encoding of every (point, neighbor) pair; shared by all units of a block."""
    positions = T.as_tensor(positions)
    q = idx.indices.shape[0]
    if q != positions.shape[0]:
        raise ShapeError(f"neighbor index has {q} rows for {positions.shape[0]} points")
    return raw_position_encoding(positions, T.gather_neighbors(positions, idx), cfg)


def locse(positions, features, idx: NeighborIndex, cfg: LocSEConfig,
          params: Optional[MlpParams], raw: Optional[Tensor] = None) -> Tensor:
    """Neighbor features augmented with their encoded relative positions: Q x K x 2d.

    ``raw`` may carry a precomputed :func:`neighborhood_geometry`.
    """
    gathered = T.gather_neighbors(features, idx)
    if cfg.variant == "none":
        return gathered
    if raw is None:
        raw = neighborhood_geometry(positions, idx, cfg)
    if params.d_in != cfg.raw_width:
        raise ConfigError(
            f"encoding MLP expects {params.d_in} inputs but variant {cfg.variant!r} "
            f"produces {cfg.raw_width}"
        )
    r = shared_mlp(raw, params)
    return T.concat([r, gathered], axis=-1)


# ---------------------------------------------------------------------------
# pooling


def attention_weights(fhat, score_params: MlpParams) -> Tensor:
    """Per-channel softmax over the K neighbors of a shared linear score."""
    fhat = T.as_tensor(fhat)
    if score_params.d_in != fhat.shape[-1] or score_params.d_out != fhat.shape[-1]:
        raise ShapeError(
            f"score MLP {score_params.d_in}->{score_params.d_out} for feature width {fhat.shape[-1]}"
        )
    return T.softmax(shared_mlp(fhat, score_params, activation="none"), axis=1)


def pool_neighbors(fhat, score_params: Optional[MlpParams], mode: str = "attentive") -> Tensor:
    """Q x K x D -> Q x D reduction over neighbors."""
    fhat = T.as_tensor(fhat)
    if fhat.ndim != 3:
        raise ShapeError(f"expected Q x K x D features, got {fhat.shape}")
    if mode == "attentive":
        if score_params.bias is None and score_params.weight.shape == (fhat.shape[-1],) * 2:
            return T.attentive_sum(fhat, score_params.weight)
        s = attention_weights(fhat, score_params)
        return T.sum(T.mul(fhat, s), axis=1)
    if mode == "max":
        return T.max(fhat, axis=1)
    if mode == "mean":
        return T.mean(fhat, axis=1)
    if mode == "sum":
        return T.sum(fhat, axis=1)
    raise ArgumentError(f"unknown pooling mode {mode!r}")


def attentive_pool(fhat, score_params: Optional[MlpParams], post_params: MlpParams,
                   mode: str = "attentive") -> Tensor:
    return shared_mlp(pool_neighbors(fhat, score_params, mode), post_params)


# ---------------------------------------------------------------------------
# dilated residual block


@dataclass
class UnitParams:
    encode: Optional[MlpParams]
    score: Optional[MlpParams]
    post: MlpParams


@dataclass
class BlockParams:
    pre: MlpParams
    units: List[UnitParams]
    main: MlpParams
    skip: MlpParams

    def named(self, prefix: str) -> Dict[str, Tensor]:
        out = {}

        def put(name, p):
            if p is None:
                return
            out[f"{prefix}.{name}.weight"] = p.weight
            if p.bias is not None:
                out[f"{prefix}.{name}.bias"] = p.bias

        put("pre", self.pre)
        for i, u in enumerate(self.units):
            put(f"unit{i}.encode", u.encode)
            put(f"unit{i}.score", u.score)
            put(f"unit{i}.post", u.post)
        put("main", self.main)
        put("skip", self.skip)
        return out


def init_block(rng: np.random.Generator, d_in: int, cfg: BlockConfig, dtype=np.float64) -> BlockParams:
    half = cfg.d_out // 2
    pre = init_mlp(rng, d_in, half, dtype=dtype)
    units = []
    for u in range(cfg.units):
        encode = None
        width = half
        if cfg.locse.variant != "none":
            encode = init_mlp(rng, cfg.locse.raw_width, half, dtype=dtype)
            width = 2 * half
        # softmax over neighbors cancels any per-channel bias, so the score map has none
        score = init_mlp(rng, width, width, bias=False, dtype=dtype) if cfg.pooling == "attentive" else None
        out = cfg.d_out if u == cfg.units - 1 else half
        units.append(UnitParams(encode, score, init_mlp(rng, width, out, dtype=dtype)))
    main = init_mlp(rng, cfg.d_out, 2 * cfg.d_out, dtype=dtype)
    skip = init_mlp(rng, d_in, 2 * cfg.d_out, dtype=dtype)
    return BlockParams(pre, units, main, skip)


def dilated_residual_block(positions, features, idx: NeighborIndex, cfg: BlockConfig,
                           params: BlockParams) -> Tensor:
    """N x d_in features -> N x 2*d_out; row i sees only its ``cfg.units``-hop neighborhood."""
    features = T.as_tensor(features)
    if len(params.units) != cfg.units:
        raise ConfigError(f"{len(params.units)} unit parameter sets for units={cfg.units}")
    x = shared_mlp(features, params.pre)
    raw = None if cfg.locse.variant == "none" else neighborhood_geometry(positions, idx, cfg.locse)
    for unit in params.units:
        fhat = locse(positions, x, idx, cfg.locse, unit.encode, raw=raw)
        x = attentive_pool(fhat, unit.score, unit.post, cfg.pooling)
    main = shared_mlp(x, params.main, activation="none")
    skip = shared_mlp(features, params.skip, activation="none")
    return T.leaky_relu(T.add(main, skip))


# ---------------------------------------------------------------------------
# resampling


def decimated_count(n: int, ratio: float) -> int:
    return int(math.ceil(n * ratio))


def downsample_layer(positions, features, ratio: float, seed: int):
    """Keep ``ceil(N * ratio)`` uniformly chosen points; returns (positions, features, kept)."""
    from .samplers import random_indices

    if not 0.0 < ratio < 1.0:
        raise ArgumentError(f"ratio must be in (0, 1), got {ratio}")
    pos = np.asarray(getattr(positions, "data", positions))
    n = pos.shape[0]
    k = decimated_count(n, ratio)
    if k == 0:
        raise ArgumentError(f"decimating {n} points by {ratio} leaves none")
    kept = np.sort(random_indices(n, k, seed))
    return pos[kept], T.gather_rows(features, kept), kept


def upsample_layer(coarse_positions, coarse_features, fine_positions, skip_features,
                   params: MlpParams, neighbors: Optional[NeighborIndex] = None) -> Tensor:
    """Copy each fine point's nearest coarse feature, append the skip feature, apply an MLP."""
    coarse_positions = np.asarray(getattr(coarse_positions, "data", coarse_positions))
    fine_positions = np.asarray(getattr(fine_positions, "data", fine_positions))
    if neighbors is None:
        neighbors = nearest_one(coarse_positions, fine_positions)
    up = T.gather_rows(coarse_features, neighbors.indices[:, 0])
    skip = T.as_tensor(skip_features)
    if skip.shape[0] != fine_positions.shape[0]:
        raise ShapeError(f"{skip.shape[0]} skip rows for {fine_positions.shape[0]} fine points")
    return shared_mlp(T.concat([skip, up], axis=-1), params)


# ---------------------------------------------------------------------------
# inspection


def dump_attention_matrix(score_params: List[MlpParams], out_dir) -> List[str]:
    """Write each layer's attention-score weight matrix to ``layer<i>_W.csv``."""
    if not score_params:
        raise ArgumentError("no attention-score parameters to dump")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, p in enumerate(score_params):
        if p is None:
            raise ArgumentError(f"layer {i} has no attention-score parameters")
        path = os.path.join(out_dir, f"layer{i}_W.csv")
        np.savetxt(path, p.weight.data, delimiter=",", fmt="%.17g")
        paths.append(path)
    return paths


def load_attention_matrix(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
