"""The graph / semantic / transformer imputation network.

All layer functions take a batch of samples: node features are (B, S, width)
where S indexes sensors.  Parameters live in :class:`GTTDIParams` as named
float64 :class:`~gttdi.autodiff.Tensor` leaves.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import EdgeSet
from .semantic import LABELS

CKPT_MAGIC = b"GTTDICKP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    slice_len: int
    edge_dim: int = 3
    graph_heads: int = 2
    graph_head_dim: int = 16
    graph_out: int = 64              # H_G
    sem_dim: int = 16                # F_s
    sem_hidden_channels: int = 8
    sem_out: int = 64                # H_P
    sem_kernel: int = 3
    enc_layers: int = 1
    enc_heads: int = 4
    enc_ff_mult: int = 4
    dropout: float = 0.1
    slope: float = 0.01

    @property
    def node_in(self) -> int:
        # zero-filled slice values + per-point observation flags
        return 2 * self.slice_len

    @property
    def sem_width(self) -> int:       # F'
        return len(LABELS) * self.sem_dim

    @property
    def hidden(self) -> int:          # H_T
        return self.graph_out + self.sem_out

    def validate(self) -> None:
        if self.sem_out % self.sem_dim:
            raise ValueError(f"sem_out {self.sem_out} must be a multiple of sem_dim {self.sem_dim}")
        if self.hidden % self.enc_heads:
            raise ValueError(f"hidden width {self.hidden} not divisible by {self.enc_heads} heads")


def _glorot(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class GTTDIParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    bn_stats: ad.RunningStats = field(default=None)

    def __post_init__(self):
        if self.bn_stats is None:
            self.bn_stats = ad.RunningStats(self.config.hidden)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "GTTDIParams":
        stats = ad.RunningStats(self.config.hidden)
        stats.mean, stats.var = self.bn_stats.mean.copy(), self.bn_stats.var.copy()
        return GTTDIParams(self.config,
                           {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
                           stats)

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.tensors.items()}
        out["bn.running_mean"] = self.bn_stats.mean
        out["bn.running_var"] = self.bn_stats.var
        return out


def init_params(config: ModelConfig, seed: int = 0) -> GTTDIParams:
    config.validate()
    rng = np.random.default_rng(seed)
    c = config
    arrays: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out, bias=True):
        arrays[f"{name}.w"] = _glorot(rng, n_in, n_out, (n_in, n_out))
        if bias:
            arrays[f"{name}.b"] = np.zeros(n_out)

    def graph_layer(name, n_in, heads, d, gated):
        for proj in ("q", "k", "v"):
            dense(f"{name}.{proj}", n_in, heads * d)
        dense(f"{name}.e", c.edge_dim, heads * d)
        if gated:
            dense(f"{name}.r", n_in, d, bias=False)
            dense(f"{name}.gate", 3 * d, 1)

    graph_layer("g1", c.node_in, c.graph_heads, c.graph_head_dim, gated=False)
    graph_layer("g2", c.graph_heads * c.graph_head_dim, c.graph_heads, c.graph_out, gated=True)

    n_lab, out_ch = len(LABELS), c.sem_out // c.sem_dim
    k = c.sem_kernel
    arrays["sem.conv1.w"] = _glorot(rng, n_lab * k, c.sem_hidden_channels * k, (c.sem_hidden_channels, n_lab, k))
    arrays["sem.conv1.b"] = np.zeros(c.sem_hidden_channels)
    arrays["sem.conv2.w"] = _glorot(rng, c.sem_hidden_channels * k, out_ch * k, (out_ch, c.sem_hidden_channels, k))
    arrays["sem.conv2.b"] = np.zeros(out_ch)
    if c.sem_width != c.sem_out:
        dense("sem.proj", c.sem_width, c.sem_out, bias=False)

    h = c.hidden
    arrays["bn.gamma"] = np.ones(h)
    arrays["bn.beta"] = np.zeros(h)
    for i in range(c.enc_layers):
        for proj in ("q", "k", "v", "o"):
            dense(f"enc{i}.{proj}", h, h)
        dense(f"enc{i}.ff1", h, c.enc_ff_mult * h)
        dense(f"enc{i}.ff2", c.enc_ff_mult * h, h)
        for ln in ("ln1", "ln2"):
            arrays[f"enc{i}.{ln}.g"] = np.ones(h)
            arrays[f"enc{i}.{ln}.b"] = np.zeros(h)
    dense("out1", h, h)
    dense("out2", h, c.slice_len)
    return GTTDIParams(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})


# ---------------------------------------------------------------- graph module

@dataclass(frozen=True)
class AttentionEdges:
    """Directed message edges src -> dst including one zero-feature self-loop per node."""

    src: np.ndarray
    dst: np.ndarray
    features: np.ndarray
    n_nodes: int


def attention_edges(edges: EdgeSet, n_nodes: int) -> AttentionEdges:
    if edges.n_edges and (edges.pairs.min() < 0 or edges.pairs.max() >= n_nodes):
        raise IndexError(f"edge references a node outside [0, {n_nodes})")
    loops = np.arange(n_nodes)
    src = np.concatenate([edges.pairs[0], loops])
    dst = np.concatenate([edges.pairs[1], loops])
    feats = np.concatenate([edges.features, np.zeros((n_nodes, edges.features.shape[1]))])
    return AttentionEdges(src, dst, feats, n_nodes)


def _linear(x: Tensor, params: GTTDIParams, name: str) -> Tensor:
    y = x @ params[f"{name}.w"]
    b = f"{name}.b"
    return y + params[b] if b in params else y


def _messages(h: Tensor, edges: AttentionEdges, params: GTTDIParams, name: str, heads: int, d: int):
    """Per-head aggregated messages (B, S, C, d) and attention weights (B, W, C)."""
    b, s, _ = h.shape
    q = _linear(h, params, f"{name}.q").reshape(b, s, heads, d)
    k = _linear(h, params, f"{name}.k").reshape(b, s, heads, d)
    v = _linear(h, params, f"{name}.v").reshape(b, s, heads, d)
    e = _linear(Tensor(edges.features), params, f"{name}.e").reshape(1, -1, heads, d)
    q_i = ad.take(q, edges.dst, axis=1)
    ke = ad.take(k, edges.src, axis=1) + e
    scores = ad.scale((q_i * ke).sum(axis=-1), 1.0 / math.sqrt(d))        # (B, W, C)
    alpha = ad.segment_softmax(scores, edges.dst, s, axis=1)
    msg = ad.take(v, edges.src, axis=1) + e
    weighted = msg * alpha.reshape(b, -1, heads, 1)
    return ad.segment_sum(weighted, edges.dst, s, axis=1), alpha


def graph_attention_layer(h: Tensor, edges: AttentionEdges, params: GTTDIParams, name: str = "g1",
                          return_attention: bool = False):
    """Multi-head edge-aware attention; heads concatenated -> (B, S, C*d)."""
    c = params.config
    agg, alpha = _messages(h, edges, params, name, c.graph_heads, c.graph_head_dim)
    out = agg.reshape(h.shape[0], h.shape[1], -1)
    return (out, alpha) if return_attention else out


def graph_output_layer(h: Tensor, edges: AttentionEdges, params: GTTDIParams, name: str = "g2",
                       return_parts: bool = False):
    """Head-averaged attention output blended with a residual projection by a learned gate."""
    c = params.config
    agg, alpha = _messages(h, edges, params, name, c.graph_heads, c.graph_out)
    h_hat = agg.mean(axis=2)                                              # (B, S, d)
    r = h @ params[f"{name}.r.w"]
    beta = ad.sigmoid(_linear(ad.concat([h_hat, r, h_hat - r], axis=-1), params, f"{name}.gate"))
    out = (1.0 - beta) * h_hat + beta * r
    if return_parts:
        return out, {"h_hat": h_hat, "r": r, "beta": beta, "alpha": alpha}
    return out


def node_inputs(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero-filled values next to their 0/1 observation flags: (B, S, 2L)."""
    mask = np.asarray(mask, dtype=bool)
    return np.concatenate([np.where(mask, values, 0.0), mask.astype(np.float64)], axis=-1)


def graph_module(x: Tensor, edges: AttentionEdges, params: GTTDIParams) -> Tensor:
    h = graph_attention_layer(x, edges, params, "g1")
    h = ad.leaky_relu(h, params.config.slope)
    return graph_output_layer(h, edges, params, "g2")


# ---------------------------------------------------------------- semantic module

def semantic_module(p_sem: Tensor, params: GTTDIParams, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Two label-channel convolutions with a projected residual: (B, S, F') -> (B, S, H_P)."""
    c = params.config
    b, s, width = p_sem.shape
    if width != c.sem_width:
        raise ad.ShapeError(f"semantic input width {width} != {c.sem_width}")
    x = p_sem.reshape(b * s, len(LABELS), c.sem_dim)
    y = ad.conv1d(x, params["sem.conv1.w"], params["sem.conv1.b"])
    y = ad.leaky_relu(y, c.slope)
    y = ad.conv1d(y, params["sem.conv2.w"], params["sem.conv2.b"])
    y = y.reshape(b, s, c.sem_out)
    skip = p_sem @ params["sem.proj.w"] if "sem.proj.w" in params else p_sem
    return skip + ad.dropout(y, c.dropout, rng, training)


# ---------------------------------------------------------------- transformer module

def self_attention(x: Tensor, params: GTTDIParams, name: str) -> Tensor:
    c = params.config
    b, s, h = x.shape
    nh, dh = c.enc_heads, h // c.enc_heads

    def heads(t):
        return t.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)

    q = heads(_linear(x, params, f"{name}.q"))
    k = heads(_linear(x, params, f"{name}.k"))
    v = heads(_linear(x, params, f"{name}.v"))
    att = ad.softmax(ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh)), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, s, h)
    return _linear(out, params, f"{name}.o")


def encoder_layer(x: Tensor, params: GTTDIParams, name: str, training: bool, rng) -> Tensor:
    c = params.config
    x = ad.layer_norm(x + ad.dropout(self_attention(x, params, name), c.dropout, rng, training),
                      params[f"{name}.ln1.g"], params[f"{name}.ln1.b"])
    ff = _linear(ad.relu(_linear(x, params, f"{name}.ff1")), params, f"{name}.ff2")
    return ad.layer_norm(x + ad.dropout(ff, c.dropout, rng, training),
                         params[f"{name}.ln2.g"], params[f"{name}.ln2.b"])


def transformer_module(y_t: Tensor, params: GTTDIParams, training: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
    """Batch norm -> encoder over the sensor axis -> linear, leaky-relu, linear to slice length."""
    c = params.config
    if y_t.shape[-1] != c.hidden:
        raise ad.ShapeError(f"transformer input width {y_t.shape[-1]} != {c.hidden}")
    x = ad.batch_norm(y_t, params["bn.gamma"], params["bn.beta"], params.bn_stats, training)
    for i in range(c.enc_layers):
        x = encoder_layer(x, params, f"enc{i}", training, rng)
    x = ad.leaky_relu(_linear(x, params, "out1"), c.slope)
    return _linear(x, params, "out2")


def forward(values: np.ndarray, mask: np.ndarray, edges: AttentionEdges, p_sem: np.ndarray,
            params: GTTDIParams, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Imputation output in normalized units, (B, S, L)."""
    c = params.config
    if values.shape[-1] != c.slice_len:
        raise ad.ShapeError(f"slice length {values.shape[-1]} != model slice length {c.slice_len}")
    if p_sem.shape[:2] != values.shape[:2]:
        raise ad.ShapeError(f"semantic tensor {p_sem.shape} does not match data {values.shape}")
    y_g = graph_module(Tensor(node_inputs(values, mask)), edges, params)
    y_p = semantic_module(Tensor(p_sem), params, training, rng)
    return transformer_module(ad.concat([y_g, y_p], axis=-1), params, training, rng)


def output_shape(data_shape: tuple[int, int, int], n_edges: int, sem_shape: tuple[int, int, int],
                 config: ModelConfig) -> tuple[int, int, int]:
    """Shape of the output for given input shapes, checked without allocating anything."""
    k, s, length = data_shape
    if length != config.slice_len:
        raise ad.ShapeError(f"slice length {length} != {config.slice_len}")
    if sem_shape[:2] != (k, s) or sem_shape[2] != config.sem_width:
        raise ad.ShapeError(f"semantic tensor {sem_shape} incompatible with {data_shape}")
    if n_edges < 0:
        raise ad.ShapeError("negative edge count")
    return (k, s, config.slice_len)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: GTTDIParams, extra: dict | None = None) -> None:
    state = params.state()
    names = list(state)
    manifest = {
        "version": CKPT_VERSION,
        "config": asdict(params.config),
        "arrays": [[n, list(state[n].shape)] for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[GTTDIParams, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    manifest = json.loads(raw[off:off + n])
    off += n
    arrays = {}
    for name, shape in manifest["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    config = ModelConfig(**manifest["config"])
    stats = ad.RunningStats(config.hidden)
    stats.mean = arrays.pop("bn.running_mean")
    stats.var = arrays.pop("bn.running_var")
    params = GTTDIParams(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}, stats)
    return params, manifest["extra"]
