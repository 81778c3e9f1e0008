"""Encoder-decoder segmentation network.

Data flow for the default four-layer configuration (N input points)::

    normalize            xy centroid to the origin, coordinates / coord_scale
    input MLP            N     x d_in -> 8
    encoder i (0..3)     block at N_i points -> width w_i, then keep ceil(N_i / 4)
    bottleneck MLP       N_4   x 512 -> 512
    decoder j (0..3)     1-NN copy to the finer level, concat skip, MLP to the skip width
    head                 N x 32 -> 64 -> 32 -> dropout -> n_class

Skip features are the first block's output at full resolution followed by each
decimated encoder output, so decoder widths run 256, 128, 32, 32.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .aggregation import (
    BlockConfig,
    BlockParams,
    LocSEConfig,
    decimated_count,
    dilated_residual_block,
    init_block,
    upsample_layer,
)
from .errors import ArgumentError, ConfigError, ShapeError
from .neighbors import NeighborIndex, knn, nearest_one
from .nn import MlpParams, init_mlp, shared_mlp
from .samplers import random_indices
from .tensor import Tensor

MIN_POINTS = 16
DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class NetworkConfig:
    d_in: int = 3
    n_class: int = 3
    encoder_widths: Tuple[int, ...] = (32, 128, 256, 512)
    decimation: float = 0.25
    k: int = 16
    block: BlockConfig = field(default_factory=BlockConfig)
    input_width: int = 8
    head_widths: Tuple[int, ...] = (64, 32)
    dropout: float = 0.5
    slope: float = 0.2
    coord_scale: float = 5.0
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.d_in not in (3, 4, 6):
            raise ConfigError(f"d_in must be 3, 4 or 6, got {self.d_in}")
        if self.n_class < 2:
            raise ConfigError(f"n_class must be >= 2, got {self.n_class}")
        w = self.encoder_widths
        if not w:
            raise ConfigError("at least one encoder layer is required")
        if any(x <= 0 for x in w) or any(b < a for a, b in zip(w, w[1:])):
            raise ConfigError(f"encoder widths must be positive and non-decreasing, got {list(w)}")
        if any(x % 4 for x in w):
            raise ConfigError(f"encoder widths must be multiples of 4, got {list(w)}")
        if not 0.0 < self.decimation < 1.0:
            raise ConfigError(f"decimation must be in (0, 1), got {self.decimation}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.input_width < 1 or not self.head_widths or any(x < 1 for x in self.head_widths):
            raise ConfigError("input and head widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not self.coord_scale > 0:
            raise ConfigError(f"coord_scale must be positive, got {self.coord_scale}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.block.locse.k != self.k:
            object.__setattr__(self, "block", dataclasses.replace(
                self.block, locse=dataclasses.replace(self.block.locse, k=self.k)))

    @property
    def n_layers(self) -> int:
        return len(self.encoder_widths)

    def to_dict(self) -> dict:
        return {
            "d_in": self.d_in,
            "n_class": self.n_class,
            "encoder_widths": list(self.encoder_widths),
            "decimation": self.decimation,
            "k": self.k,
            "units": self.block.units,
            "pooling": self.block.pooling,
            "locse": self.block.locse.variant,
            "input_width": self.input_width,
            "head_widths": list(self.head_widths),
            "dropout": self.dropout,
            "slope": self.slope,
            "coord_scale": self.coord_scale,
            "seed": self.seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)} | {"units", "pooling", "locse"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        block = BlockConfig(
            units=int(d.pop("units", 2)),
            pooling=str(d.pop("pooling", "attentive")),
            locse=LocSEConfig(variant=str(d.pop("locse", "full")), k=int(d.get("k", 16))),
        )
        return cls(block=block, **d)


@dataclass
class Geometry:
    """Everything a forward pass needs that depends only on coordinates and seed."""

    positions: List[np.ndarray]  # per level, level 0 = input
    neighbors: List[NeighborIndex]  # per encoder layer, on its own level
    kept: List[np.ndarray]  # per encoder layer, indices into that level
    upsample: List[NeighborIndex]  # per encoder layer: level i+1 -> level i nearest

    @property
    def counts(self) -> List[int]:
        return [len(p) for p in self.positions]


def layer_counts(n: int, n_layers: int, ratio: float = 0.25) -> List[int]:
    out = []
    for _ in range(n_layers):
        n = decimated_count(n, ratio)
        out.append(n)
    return out


def normalize_positions(cfg: NetworkConfig, positions: np.ndarray) -> np.ndarray:
    """Shift the horizontal centroid to the origin and divide by ``cfg.coord_scale``.

    Height is kept relative to z=0 so ground level stays meaningful.
    """
    pos = np.array(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ShapeError(f"expected N x 3 positions, got {pos.shape}")
    if len(pos):
        pos[:, :2] -= pos[:, :2].mean(axis=0)
    pos /= cfg.coord_scale
    return pos


def prepare_geometry(cfg: NetworkConfig, positions: np.ndarray, seed: int,
                     first_neighbors: Optional[NeighborIndex] = None) -> Geometry:
    """KNN per level, random decimation (layer i uses ``seed + i``), upsampling links.

    ``positions`` are raw coordinates; level 0 of the result holds them normalized.
    """
    pos = normalize_positions(cfg, positions)
    if len(pos) < MIN_POINTS:
        raise ArgumentError(f"need at least {MIN_POINTS} points, got {len(pos)}")
    levels, nbrs, kept, ups = [pos], [], [], []
    for i in range(cfg.n_layers):
        cur = levels[-1]
        k = min(cfg.k, len(cur))
        if i == 0 and first_neighbors is not None:
            if first_neighbors.indices.shape != (len(cur), k):
                raise ShapeError("cached neighbor index does not match the cloud")
            nb = first_neighbors
        else:
            nb = knn(cur, cur, k)
        keep = np.sort(random_indices(len(cur), decimated_count(len(cur), cfg.decimation), seed + i))
        nxt = cur[keep]
        nbrs.append(nb)
        kept.append(keep)
        ups.append(nearest_one(nxt, cur))
        levels.append(nxt)
    return Geometry(levels, nbrs, kept, ups)


class Network:
    """Parameters plus the forward computation; build with :func:`build_network`."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        dt = DTYPES[cfg.dtype]
        rng = np.random.default_rng(cfg.seed)
        self.input = init_mlp(rng, cfg.d_in, cfg.input_width, dtype=dt)
        self.blocks: List[BlockParams] = []
        d = cfg.input_width
        for w in cfg.encoder_widths:
            bcfg = dataclasses.replace(cfg.block, d_out=w // 2)
            self.blocks.append(init_block(rng, d, bcfg, dtype=dt))
            d = w
        self.skip_widths = [cfg.encoder_widths[0], *cfg.encoder_widths]
        self.bottleneck = init_mlp(rng, d, d, dtype=dt)
        self.decoders: List[MlpParams] = []
        for j in range(cfg.n_layers):
            skip_w = self.skip_widths[cfg.n_layers - 1 - j]
            self.decoders.append(init_mlp(rng, skip_w + d, skip_w, dtype=dt))
            d = skip_w
        self.head: List[MlpParams] = []
        for w in cfg.head_widths:
            self.head.append(init_mlp(rng, d, w, dtype=dt))
            d = w
        self.classifier = init_mlp(rng, d, cfg.n_class, dtype=dt)
        self.last_trace: List[Tuple[str, tuple]] = []

    def block_config(self, i: int) -> BlockConfig:
        return dataclasses.replace(self.cfg.block, d_out=self.cfg.encoder_widths[i] // 2)

    def parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}

        def put(name, p):
            out[f"{name}.weight"] = p.weight
            if p.bias is not None:
                out[f"{name}.bias"] = p.bias

        put("input", self.input)
        for i, b in enumerate(self.blocks):
            out.update(b.named(f"enc{i}"))
        put("bottleneck", self.bottleneck)
        for j, p in enumerate(self.decoders):
            put(f"dec{j}", p)
        for j, p in enumerate(self.head):
            put(f"head{j}", p)
        put("classifier", self.classifier)
        return out

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data[...] = value

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def attention_score_params(self) -> List[Optional[MlpParams]]:
        """The last unit's score map of every encoder block."""
        return [b.units[-1].score for b in self.blocks]

    # -- forward --------------------------------------------------------

    def forward(self, cloud, mode: str = "infer", seed: Optional[int] = None,
                geometry: Optional[Geometry] = None) -> Tensor:
        """Logits, N x n_class. ``mode="train"`` enables dropout.

        Sampling layer i is seeded with ``seed + i`` and dropout with ``seed``;
        ``seed`` defaults to the config seed, so inference is deterministic.
        """
        if mode not in ("train", "infer"):
            raise ArgumentError(f"mode must be 'train' or 'infer', got {mode!r}")
        cfg = self.cfg
        if seed is None:
            seed = cfg.seed
        feats = np.asarray(getattr(cloud, "input_features", lambda: cloud)())
        if feats.ndim != 2 or feats.shape[1] != cfg.d_in:
            raise ShapeError(f"network expects {cfg.d_in} input channels, got shape {feats.shape}")
        if geometry is None:
            geometry = prepare_geometry(cfg, feats[:, :3], seed)
        if geometry.counts[0] != len(feats):
            raise ShapeError("geometry was prepared for a different cloud")
        dt = DTYPES[cfg.dtype]
        trace = []

        feats = np.concatenate([geometry.positions[0], feats[:, 3:]], axis=1)
        x = shared_mlp(Tensor(feats.astype(dt)), self.input, slope=cfg.slope)
        trace.append(("input", x.shape))
        skips = []
        for i, params in enumerate(self.blocks):
            pos = Tensor(geometry.positions[i].astype(dt))
            x = dilated_residual_block(pos, x, geometry.neighbors[i], self.block_config(i), params)
            trace.append((f"encoder{i}", x.shape))
            if i == 0:
                skips.append(x)
            x = T.gather_rows(x, geometry.kept[i])
            trace.append((f"sample{i}", x.shape))
            skips.append(x)

        x = shared_mlp(x, self.bottleneck, slope=cfg.slope)
        trace.append(("bottleneck", x.shape))
        for j, params in enumerate(self.decoders):
            fine = cfg.n_layers - 1 - j
            x = upsample_layer(geometry.positions[fine + 1], x, geometry.positions[fine],
                               skips[fine], params, neighbors=geometry.upsample[fine])
            trace.append((f"decoder{j}", x.shape))

        rng = np.random.default_rng(seed)
        for j, params in enumerate(self.head):
            x = shared_mlp(x, params, slope=cfg.slope)
            trace.append((f"head{j}", x.shape))
        x = T.dropout(x, cfg.dropout, rng, training=(mode == "train"))
        trace.append(("dropout", x.shape))
        x = shared_mlp(x, self.classifier, activation="none")
        trace.append(("logits", x.shape))
        self.last_trace = trace
        return x

    def predict(self, cloud, geometry: Optional[Geometry] = None) -> np.ndarray:
        return np.argmax(self.forward(cloud, "infer", geometry=geometry).data, axis=1)


def build_network(cfg: NetworkConfig) -> Network:
    return Network(cfg)


def forward(net: Network, cloud, mode: str = "infer", seed: Optional[int] = None) -> Tensor:
    return net.forward(cloud, mode, seed)
