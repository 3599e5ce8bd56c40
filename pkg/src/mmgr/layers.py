"""Parameterized layers, model assembly, and checkpoint serialization.

The model is a fixed feed-forward stack: five graph convolutions followed by
a per-node Linear/ReLU classifier head.  Two convolution flavors exist:

* mean-aggregating (``SageConv``):
  ``x'_i = W_self x_i + mean over neighbors j of (W_neigh x_j)``
* residual edge-gated (``GatedConv``), which replaces the mean by a sum of
  gated messages: ``x'_i = W_self x_i + sum_j gate(i,j) * (W_neigh x_j)``
  with ``gate(i,j) = sigmoid(W_gate_self x_i + W_gate_neigh x_j)``, computed
  per directed edge, so gate(i,j) != gate(j,i) in general.

The first convolution is heterogeneous: node kinds carry different input
widths, so it holds one weight per kind and projects before aggregating.
Later layers share a single weight set.  Gradients are explicit per-layer
backward functions composed in reverse; there is no tape.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, MmgrError, ShapeError
from .graphs import CONCAT_ORDER, BatchedGraph, NodeKind, Topology, input_dims
from .tensor import Matrix, make_rng, relu, relu_backward, sigmoid

_KIND_ORDER = list(NodeKind)
_KIND_CODES = {k: i for i, k in enumerate(_KIND_ORDER)}


@dataclass
class Parameter:
    name: str
    value: Matrix
    grad: Matrix
    trainable: bool = True

    @classmethod
    def create(cls, name: str, value: Matrix, trainable: bool = True) -> "Parameter":
        value = np.asarray(value, dtype=np.float64)
        return cls(name, value, np.zeros_like(value), trainable)


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Matrix:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _sum_rows(m: Matrix) -> Matrix:
    return m.sum(axis=0, keepdims=True)


class _KindBuckets:
    """Nodes grouped by kind with per-kind stacked feature matrices."""

    def __init__(self, batch: BatchedGraph, in_dims: dict[NodeKind, int], layer: str):
        self.order: list[NodeKind] = []
        self.index: dict[NodeKind, np.ndarray] = {}
        self.x: dict[NodeKind, Matrix] = {}
        for kind, idx in batch.kind_groups().items():
            if kind not in in_dims:
                raise ShapeError(f"{layer}: no input width declared for kind {kind.value}")
            xk = np.stack([batch.features[i] for i in idx])
            if xk.shape[1] != in_dims[kind]:
                raise ShapeError(
                    f"{layer}: kind {kind.value} has dim {xk.shape[1]}, "
                    f"expected {in_dims[kind]}"
                )
            self.order.append(kind)
            self.index[kind] = idx
            self.x[kind] = xk

    def scatter_rows(self, n: int, per_kind: dict[NodeKind, Matrix]) -> list[np.ndarray]:
        """Ragged per-node gradient rows from per-kind row blocks."""
        out: list[np.ndarray | None] = [None] * n
        for kind in self.order:
            block = per_kind[kind]
            for row, node in enumerate(self.index[kind]):
                out[node] = block[row]
        return out  # type: ignore[return-value]


class GraphConvBase:
    """Shared projection plumbing for both convolution flavors."""

    def __init__(
        self,
        name: str,
        in_dims: dict[NodeKind, int] | int,
        out_dim: int,
        bias: bool = True,
        weight_tags: tuple[str, ...] = ("self", "neigh"),
    ):
        self.name = name
        self.out_dim = out_dim
        self.bias = bias
        self.heterogeneous = isinstance(in_dims, dict)
        self.in_dims = dict(in_dims) if self.heterogeneous else {None: int(in_dims)}
        self.weights: dict[str, dict] = {tag: {} for tag in weight_tags}
        self.biases: dict[str, Parameter] = {}
        self._params: list[Parameter] = []

    def build_params(self, rng: np.random.Generator, bias_tags: tuple[str, ...]) -> None:
        for tag in self.weights:
            for kind in self._kind_iter():
                fan_in = self.in_dims[kind]
                suffix = f".{kind.value}" if kind is not None else ""
                p = Parameter.create(
                    f"{self.name}.{tag}{suffix}", _init_weight(rng, fan_in, self.out_dim)
                )
                self.weights[tag][kind] = p
                self._params.append(p)
        if self.bias:
            for tag in bias_tags:
                p = Parameter.create(f"{self.name}.bias_{tag}", np.zeros((1, self.out_dim)))
                self.biases[tag] = p
                self._params.append(p)

    def _kind_iter(self):
        if not self.heterogeneous:
            return [None]
        return [k for k in _KIND_ORDER if k in self.in_dims]

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def _bias_row(self, tag: str) -> Matrix | float:
        return self.biases[tag].value if self.bias else 0.0

    # -- per-kind projections ------------------------------------------------

    def _project(self, buckets, x, tag: str, n: int, bias_tag: str | None = None) -> Matrix:
        """X @ W[tag] (+ bias) for every node, handling both input layouts."""
        bias = self._bias_row(bias_tag) if bias_tag else 0.0
        if not self.heterogeneous:
            if x.shape[1] != self.in_dims[None]:
                raise ShapeError(
                    f"{self.name}: input dim {x.shape[1]}, expected {self.in_dims[None]}"
                )
            return x @ self.weights[tag][None].value + bias
        out = np.zeros((n, self.out_dim))
        for kind in buckets.order:
            out[buckets.index[kind]] = buckets.x[kind] @ self.weights[tag][kind].value
        return out + bias if self.bias and bias_tag else out

    def _project_backward(self, buckets, x, tag: str, dproj: Matrix, bias_tag: str | None, dx_accum):
        """Accumulate dW (and bias grad), and add input grads into dx_accum."""
        if bias_tag and self.bias:
            self.biases[bias_tag].grad += _sum_rows(dproj)
        if not self.heterogeneous:
            w = self.weights[tag][None]
            w.grad += x.T @ dproj
            dx_accum += dproj @ w.value.T
            return
        for kind in buckets.order:
            idx = buckets.index[kind]
            w = self.weights[tag][kind]
            rows = dproj[idx]
            w.grad += buckets.x[kind].T @ rows
            dx_accum[kind] += rows @ w.value.T

    def _prepare_input(self, batch: BatchedGraph, x):
        if self.heterogeneous:
            if x is not None:
                raise ConfigError(f"{self.name}: heterogeneous layer consumes graph inputs")
            return _KindBuckets(batch, self.in_dims, self.name), None
        if x is None:
            raise ConfigError(f"{self.name}: homogeneous layer needs an input table")
        return None, x

    def _zero_dx(self, buckets, x):
        if self.heterogeneous:
            return {kind: np.zeros_like(buckets.x[kind]) for kind in buckets.order}
        return np.zeros_like(x)

    def _finish_dx(self, buckets, dx, n):
        if self.heterogeneous:
            return buckets.scatter_rows(n, dx)
        return dx


class SageConv(GraphConvBase):
    """Mean-aggregating convolution, per-kind weights on the first layer."""

    def __init__(self, name, in_dims, out_dim, bias=True):
        super().__init__(name, in_dims, out_dim, bias, weight_tags=("self", "neigh"))

    def init(self, rng):
        self.build_params(rng, bias_tags=("self", "neigh"))
        return self

    def forward(self, batch: BatchedGraph, x):
        buckets, dense = self._prepare_input(batch, x)
        n = batch.n_nodes
        out_self = self._project(buckets, dense, "self", n, bias_tag="self")
        proj_neigh = self._project(buckets, dense, "neigh", n, bias_tag="neigh")
        agg = batch.neighbor_mean_op() @ proj_neigh
        cache = {"buckets": buckets, "x": dense}
        return out_self + agg, cache

    def backward(self, batch: BatchedGraph, cache, dout):
        buckets, dense = cache["buckets"], cache["x"]
        dproj_neigh = batch.neighbor_mean_op().T @ dout
        dx = self._zero_dx(buckets, dense)
        self._project_backward(buckets, dense, "self", dout, "self", dx)
        self._project_backward(buckets, dense, "neigh", dproj_neigh, "neigh", dx)
        return self._finish_dx(buckets, dx, batch.n_nodes)


class GatedConv(GraphConvBase):
    """Sum-aggregating convolution with a sigmoid gate per directed edge.

    The gate is a vector over output channels, not a scalar, and is applied
    to the projected neighbor message elementwise.
    """

    def __init__(self, name, in_dims, out_dim, bias=True):
        super().__init__(
            name, in_dims, out_dim, bias,
            weight_tags=("self", "neigh", "gate_self", "gate_neigh"),
        )

    def init(self, rng):
        self.build_params(rng, bias_tags=("self", "neigh", "gate"))
        return self

    def forward(self, batch: BatchedGraph, x):
        buckets, dense = self._prepare_input(batch, x)
        n = batch.n_nodes
        out_self = self._project(buckets, dense, "self", n, bias_tag="self")
        proj_neigh = self._project(buckets, dense, "neigh", n, bias_tag="neigh")
        gate_dst = self._project(buckets, dense, "gate_self", n)
        gate_src = self._project(buckets, dense, "gate_neigh", n)
        dst, src = batch.directed_edges()
        pre = gate_dst[dst] + gate_src[src] + (self._bias_row("gate") if self.bias else 0.0)
        gates = sigmoid(pre)
        msgs = gates * proj_neigh[src]
        out = out_self + batch.edge_scatter_op() @ msgs
        cache = {
            "buckets": buckets,
            "x": dense,
            "proj_neigh": proj_neigh,
            "gates": gates,
        }
        return out, cache

    def backward(self, batch: BatchedGraph, cache, dout):
        buckets, dense = cache["buckets"], cache["x"]
        proj_neigh, gates = cache["proj_neigh"], cache["gates"]
        dst, src = batch.directed_edges()
        n = batch.n_nodes

        dmsgs = dout[dst]
        dgates = dmsgs * proj_neigh[src]
        dpre = dgates * gates * (1.0 - gates)
        if self.bias:
            self.biases["gate"].grad += _sum_rows(dpre)

        scatter_dst = batch.edge_scatter_op()
        scatter_src = batch.edge_scatter_src_op()
        dproj_neigh = scatter_src @ (dmsgs * gates)
        dgate_dst = scatter_dst @ dpre
        dgate_src = scatter_src @ dpre

        dx = self._zero_dx(buckets, dense)
        self._project_backward(buckets, dense, "self", dout, "self", dx)
        self._project_backward(buckets, dense, "neigh", dproj_neigh, "neigh", dx)
        self._project_backward(buckets, dense, "gate_self", dgate_dst, None, dx)
        self._project_backward(buckets, dense, "gate_neigh", dgate_src, None, dx)
        return self._finish_dx(buckets, dx, n)


class Linear:
    def __init__(self, name: str, in_dim: int, out_dim: int, bias: bool = True):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.bias = bias
        self.weight: Parameter | None = None
        self.b: Parameter | None = None

    def init(self, rng):
        self.weight = Parameter.create(f"{self.name}.weight", _init_weight(rng, self.in_dim, self.out_dim))
        if self.bias:
            self.b = Parameter.create(f"{self.name}.bias", np.zeros((1, self.out_dim)))
        return self

    def parameters(self):
        return [self.weight] + ([self.b] if self.bias else [])

    def forward(self, batch, x):
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: input dim {x.shape[1]}, expected {self.in_dim}")
        out = x @ self.weight.value
        if self.bias:
            out = out + self.b.value
        return out, {"x": x}

    def backward(self, batch, cache, dout):
        x = cache["x"]
        self.weight.grad += x.T @ dout
        if self.bias:
            self.b.grad += _sum_rows(dout)
        return dout @ self.weight.value.T


class ReLU:
    def __init__(self, name: str):
        self.name = name

    def init(self, rng):
        return self

    def parameters(self):
        return []

    def forward(self, batch, x):
        return relu(x), {"x": x}

    def backward(self, batch, cache, dout):
        return relu_backward(dout, cache["x"])


@dataclass
class ModelSpec:
    """Architecture description; defaults follow the production stack."""

    topology: Topology
    gated: bool = False
    conv_dims: tuple[int, ...] = (2048, 1024, 512, 256, 128)
    head_dims: tuple[int, ...] = (128, 64, 2)
    in_dims: dict[NodeKind, int] | None = None
    bias: bool = True

    def __post_init__(self):
        self.conv_dims = tuple(int(d) for d in self.conv_dims)
        self.head_dims = tuple(int(d) for d in self.head_dims)
        if not self.conv_dims or any(d <= 0 for d in self.conv_dims):
            raise ConfigError("conv_dims must be positive and non-empty")
        if not self.head_dims or any(d <= 0 for d in self.head_dims):
            raise ConfigError("head_dims must be positive and non-empty")
        if self.head_dims[-1] != 2:
            raise ConfigError("the classifier head must end in 2 logits")

    def resolved_in_dims(self) -> dict[NodeKind, int]:
        return dict(self.in_dims) if self.in_dims is not None else input_dims(self.topology)


@dataclass
class ForwardCache:
    batch: BatchedGraph
    layer_caches: list
    serial: int


class Model:
    """Ordered layer stack with an instrumented forward counter."""

    def __init__(self, spec: ModelSpec, layers: list):
        self.spec = spec
        self.layers = layers
        self.forward_count = 0

    @property
    def topology(self) -> Topology:
        return self.spec.topology

    @property
    def gated(self) -> bool:
        return self.spec.gated

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def forward(self, batch: BatchedGraph) -> tuple[Matrix, ForwardCache]:
        if batch.topology is not self.spec.topology:
            raise ConfigError(
                f"model topology {self.spec.topology.value} cannot run a "
                f"{batch.topology.value} batch"
            )
        self.forward_count += 1
        caches = []
        x = None
        for layer in self.layers:
            x, cache = layer.forward(batch, x)
            caches.append(cache)
        return x, ForwardCache(batch, caches, self.forward_count)

    def backward(self, cache: ForwardCache, dlogits: Matrix) -> list[np.ndarray]:
        """Populate parameter grads; returns per-node input gradients."""
        if cache.serial != self.forward_count:
            raise MmgrError(
                f"stale forward cache (serial {cache.serial}, expected {self.forward_count})"
            )
        dx = dlogits
        for layer, layer_cache in zip(reversed(self.layers), reversed(cache.layer_caches)):
            dx = layer.backward(cache.batch, layer_cache, dx)
        return dx

    def snapshot(self) -> list[Matrix]:
        return [p.value.copy() for p in self.parameters()]

    def restore(self, values: list[Matrix]) -> None:
        for p, v in zip(self.parameters(), values):
            p.value[...] = v


def build_layers(spec: ModelSpec) -> list:
    conv_cls = GatedConv if spec.gated else SageConv
    layers: list = []
    in_dims: dict[NodeKind, int] | int = spec.resolved_in_dims()
    for i, out_dim in enumerate(spec.conv_dims):
        layers.append(conv_cls(f"conv{i}", in_dims, out_dim, bias=spec.bias))
        in_dims = out_dim
    width = spec.conv_dims[-1]
    for i, out_dim in enumerate(spec.head_dims):
        layers.append(Linear(f"head{i}", width, out_dim, bias=spec.bias))
        if i < len(spec.head_dims) - 1:
            layers.append(ReLU(f"relu{i}"))
        width = out_dim
    return layers


def init_model(spec: ModelSpec, seed_or_rng) -> Model:
    """Build and initialize a model; deterministic for a given seed.

    Weights are uniform in (-sqrt(1/fan_in), +sqrt(1/fan_in)); biases zero.
    """
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else make_rng(int(seed_or_rng))
    layers = [layer.init(rng) for layer in build_layers(spec)]
    return Model(spec, layers)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MMGM"
CHECKPOINT_VERSION = 1
_TOPOLOGY_CODES = {Topology.DENSE: 0, Topology.STAR: 1}
_TOPOLOGY_FROM_CODE = {v: k for k, v in _TOPOLOGY_CODES.items()}


def save_model(model: Model, path) -> None:
    spec = model.spec
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    in_dims = spec.resolved_in_dims()
    buf.write(
        struct.pack(
            "<BBBB",
            _TOPOLOGY_CODES[spec.topology],
            int(spec.gated),
            int(spec.bias),
            len(in_dims),
        )
    )
    tag = CONCAT_ORDER.encode()
    buf.write(struct.pack("<H", len(tag)))
    buf.write(tag)
    for dims in (spec.conv_dims, spec.head_dims):
        buf.write(struct.pack("<I", len(dims)))
        buf.write(struct.pack(f"<{len(dims)}I", *dims))
    for kind in _KIND_ORDER:
        if kind in in_dims:
            buf.write(struct.pack("<BI", _KIND_CODES[kind], in_dims[kind]))
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<II", p.value.shape[0], p.value.shape[1]))
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path, expect_topology: Topology | None = None, expect_gated: bool | None = None) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)

    def take(fmt):
        size = struct.calcsize(fmt)
        chunk = view.read(size)
        if len(chunk) != size:
            raise FormatError(f"checkpoint {path}: truncated")
        return struct.unpack(fmt, chunk)

    if view.read(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"checkpoint {path}: bad magic (expected MMGM)")
    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint {path}: unsupported version {version}")
    topo_code, gated, bias, n_kinds = take("<BBBB")
    if topo_code not in _TOPOLOGY_FROM_CODE:
        raise FormatError(f"checkpoint {path}: unknown topology code {topo_code}")
    topology = _TOPOLOGY_FROM_CODE[topo_code]
    (tag_len,) = take("<H")
    tag = view.read(tag_len).decode()
    if tag != CONCAT_ORDER:
        raise FormatError(
            f"checkpoint {path}: concatenation order {tag!r} does not match "
            f"this build ({CONCAT_ORDER!r})"
        )
    (n_conv,) = take("<I")
    conv_dims = take(f"<{n_conv}I")
    (n_head,) = take("<I")
    head_dims = take(f"<{n_head}I")
    in_dims = {}
    for _ in range(n_kinds):
        code, dim = take("<BI")
        in_dims[_KIND_ORDER[code]] = dim

    if expect_topology is not None and topology is not expect_topology:
        raise ConfigError(
            f"checkpoint {path} was trained with topology {topology.value}, "
            f"refusing to load as {expect_topology.value}"
        )
    if expect_gated is not None and bool(gated) != expect_gated:
        raise ConfigError(
            f"checkpoint {path} gated={bool(gated)}, refusing to load as gated={expect_gated}"
        )

    spec = ModelSpec(
        topology=topology,
        gated=bool(gated),
        conv_dims=conv_dims,
        head_dims=head_dims,
        in_dims=in_dims,
        bias=bool(bias),
    )
    model = init_model(spec, 0)
    params = model.parameters()
    (n_params,) = take("<I")
    if n_params != len(params):
        raise FormatError(
            f"checkpoint {path}: holds {n_params} parameters, model needs {len(params)}"
        )
    for p in params:
        (name_len,) = take("<H")
        name = view.read(name_len).decode()
        rows, cols = take("<II")
        if name != p.name or (rows, cols) != p.value.shape:
            raise FormatError(
                f"checkpoint {path}: parameter {name!r} {rows}x{cols} does not "
                f"match expected {p.name!r} {p.value.shape}"
            )
        raw = view.read(rows * cols * 8)
        if len(raw) != rows * cols * 8:
            raise FormatError(f"checkpoint {path}: truncated parameter payload")
        p.value[...] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols)
    if view.read(1):
        raise FormatError(f"checkpoint {path}: trailing bytes")
    return model
