"""Heterogeneous graph convolution model with two prediction heads.

One layer updates every node type i as

    H_i' = phi( H_i W_i  +  sum over connected types j of  A_ij H_j W_j )

with one weight matrix per SOURCE type per layer, shared by every
destination that aggregates from it.  The leading self-term realizes the
implicit within-type identity adjacency.  Encounters aggregate from
patients, labs, and medications; the other three types aggregate from
encounters through the transposed adjacencies.

Default node features are one-hot identities, which are never
materialized: projecting an identity feature matrix through W is W
itself, and input dropout on one-hot rows reduces to dropping whole rows
of W (one Bernoulli draw per node).

After all layers, two affine-sigmoid heads read the encounter rows:
medication probabilities (N_E x N_M) and normalized lab values
(N_E x N_L).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import CheckpointError, GraphLookupError, ParameterError, ShapeError
from .graph import MedGraph, NodeType

CHECKPOINT_MAGIC = b"MEDGCN1"

TYPE_ORDER = tuple(t.value for t in NodeType)
ENCOUNTER = NodeType.ENCOUNTER.value

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class Hyper:
    """Architecture hyperparameters."""

    hidden_dim: int = 300
    n_layers: int = 1
    dropout: float = 0.1
    activation: str = "relu"
    normalize_adjacency: bool = False

    def validate(self) -> None:
        if self.hidden_dim < 1:
            raise ParameterError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.n_layers < 1:
            raise ParameterError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    def to_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "dropout": self.dropout,
            "activation": self.activation,
            "normalize_adjacency": self.normalize_adjacency,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        return cls(**d)


@dataclass
class TypedGraphView:
    """Adjacency structure the layer math runs on, decoupled from MedGraph
    so single-type graphs exercise the same code path.

    adjacency maps (destination type, source type) to a dense matrix of
    shape (n_dest, n_src); self-pairs are implicit and never stored.
    """

    types: tuple[str, ...]
    counts: dict[str, int]
    adjacency: dict[tuple[str, str], np.ndarray]

    def validate(self) -> None:
        for (dst, src), mat in self.adjacency.items():
            if dst not in self.types or src not in self.types:
                raise ShapeError(f"adjacency pair ({dst}, {src}) names unknown types")
            want = (self.counts[dst], self.counts[src])
            if mat.shape != want:
                raise ShapeError(f"adjacency ({dst}, {src}) shape {mat.shape} != {want}")


def _row_normalize(mat: np.ndarray) -> np.ndarray:
    sums = mat.sum(axis=1, keepdims=True)
    out = np.divide(mat, sums, out=np.zeros_like(mat), where=sums != 0.0)
    return out


def make_view(graph: MedGraph, normalize_adjacency: bool = False) -> TypedGraphView:
    e, p, l, m = TYPE_ORDER
    mats = {
        (e, p): graph.a_ep,
        (e, l): graph.a_el,
        (e, m): graph.a_em,
        (p, e): graph.a_ep.T,
        (l, e): graph.a_el.T,
        (m, e): graph.a_em.T,
    }
    if normalize_adjacency:
        mats = {pair: _row_normalize(mat) for pair, mat in mats.items()}
    view = TypedGraphView(
        types=TYPE_ORDER,
        counts={
            e: graph.n_encounters,
            p: graph.n_patients,
            l: graph.n_labs,
            m: graph.n_medications,
        },
        adjacency=mats,
    )
    view.validate()
    return view


# Feature value for a type: an explicit matrix, or None for the one-hot
# identity default.
Features = dict[str, Union[Tensor, np.ndarray, None]]


def identity_features(view: TypedGraphView) -> Features:
    return {t: None for t in view.types}


@dataclass
class MedGcnModel:
    hyper: Hyper
    layers: list[dict[str, Tensor]]
    head_med_w: Tensor
    head_med_b: Tensor
    head_lab_w: Tensor
    head_lab_b: Tensor
    trained_counts: dict[str, int]
    feat_dims: dict[str, int]
    graph_binding: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            for t in TYPE_ORDER:
                params.append(layer[t])
        params.extend([self.head_med_w, self.head_med_b, self.head_lab_w, self.head_lab_b])
        return params

    def n_parameters(self) -> int:
        return sum(p.values.size for p in self.parameters())


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def init_model(
    graph: MedGraph,
    hyper: Hyper,
    seed: int,
    feature_dims: Optional[dict[str, int]] = None,
) -> MedGcnModel:
    """Glorot-uniform weights, zero head biases, deterministic under seed.

    feature_dims overrides the input width per type for callers supplying
    explicit feature matrices; the default is the one-hot width N_t.
    """
    hyper.validate()
    counts = {t.value: graph.registry.count(t) for t in NodeType}
    dims = {t: int((feature_dims or {}).get(t, counts[t])) for t in TYPE_ORDER}
    rng = np.random.default_rng(seed)

    layers: list[dict[str, Tensor]] = []
    in_dims = dict(dims)
    for _ in range(hyper.n_layers):
        layer = {
            t: Tensor(_glorot(rng, in_dims[t], hyper.hidden_dim), requires_grad=True)
            for t in TYPE_ORDER
        }
        layers.append(layer)
        in_dims = {t: hyper.hidden_dim for t in TYPE_ORDER}

    n_m = counts[NodeType.MEDICATION.value]
    n_l = counts[NodeType.LAB.value]
    head_med_w = Tensor(_glorot(rng, hyper.hidden_dim, n_m), requires_grad=True)
    head_med_b = Tensor(np.zeros((1, n_m)), requires_grad=True)
    head_lab_w = Tensor(_glorot(rng, hyper.hidden_dim, n_l), requires_grad=True)
    head_lab_b = Tensor(np.zeros((1, n_l)), requires_grad=True)

    binding = {
        "type_shas": graph.type_shas(),
        "n_encounters": graph.n_encounters,
    }
    return MedGcnModel(
        hyper, layers, head_med_w, head_med_b, head_lab_w, head_lab_b,
        counts, dims, binding,
    )


def _activation(name: str):
    if name == "relu":
        return ad.relu
    return lambda t: t


def _project_type(
    t: str,
    weight: Tensor,
    feature,
    n_nodes: int,
    training: bool,
    dropout: float,
    rng,
) -> Tensor:
    """Dropout on the type's input features, then the linear map W_t.

    Identity features take the fast path: the projection IS the weight
    matrix, zero-padded with constant rows when the graph has grown past
    the trained encounter count (new nodes carry no self-feature).
    """
    if feature is None:
        if weight.rows == n_nodes:
            return ad.dropout_rows(weight, dropout, training, rng)
        if t == ENCOUNTER and weight.rows < n_nodes:
            if training:
                raise ShapeError("cannot train with encounters unseen at initialization")
            padded = np.vstack([weight.values, np.zeros((n_nodes - weight.rows, weight.cols))])
            return Tensor(padded)
        raise ShapeError(
            f"{t} one-hot features need a {n_nodes}-row weight, got {weight.rows}"
        )
    h = feature if isinstance(feature, Tensor) else Tensor(feature)
    if h.rows != n_nodes:
        raise ShapeError(f"{t} features have {h.rows} rows for {n_nodes} nodes")
    if h.cols != weight.rows:
        raise ShapeError(f"{t} feature dim {h.cols} != weight input dim {weight.rows}")
    return ad.matmul(ad.dropout(h, dropout, training, rng), weight)


def hetero_layer_forward(
    layer: dict[str, Tensor],
    view: Union[TypedGraphView, MedGraph],
    features: Features,
    *,
    activation: str = "relu",
    training: bool = False,
    dropout: float = 0.0,
    rng=None,
    dest_types: Optional[tuple[str, ...]] = None,
) -> dict[str, Tensor]:
    """One propagation step; returns new features for dest_types (default
    all).  Projections are computed for every type in declaration order
    regardless of dest pruning, so dropout draws are position-stable.
    """
    if isinstance(view, MedGraph):
        view = make_view(view)
    phi = _activation(activation)
    projected = {
        t: _project_type(t, layer[t], features.get(t), view.counts[t], training, dropout, rng)
        for t in view.types
    }
    out: dict[str, Tensor] = {}
    for dst in dest_types if dest_types is not None else view.types:
        z = projected[dst]
        for (d, src), adj in view.adjacency.items():
            if d == dst:
                z = ad.add(z, ad.matmul(Tensor(adj), projected[src]))
        out[dst] = phi(z)
    return out


def forward(
    model: MedGcnModel,
    graph: Union[MedGraph, TypedGraphView],
    features: Optional[Features] = None,
    *,
    training: bool = False,
    rng=None,
    all_types_last_layer: bool = False,
) -> tuple[Tensor, Tensor, Tensor]:
    """Full pass: all layers, then both heads on the encounter rows.

    Returns (P, V, H_E): medication probabilities, imputed normalized lab
    values, and the final encounter representations.  The last layer only
    computes the encounter rows unless all_types_last_layer is set, since
    the heads consume nothing else.
    """
    view = make_view(graph, model.hyper.normalize_adjacency) if isinstance(graph, MedGraph) else graph
    feats: Features = dict(features) if features is not None else {t: None for t in view.types}
    rate = model.hyper.dropout if training else 0.0
    for k, layer in enumerate(model.layers):
        last = k == len(model.layers) - 1
        dest = None if (not last or all_types_last_layer) else (ENCOUNTER,)
        feats = hetero_layer_forward(
            layer, view, feats,
            activation=model.hyper.activation,
            training=training, dropout=rate, rng=rng,
            dest_types=dest,
        )
    h_e = feats[ENCOUNTER]
    p = ad.sigmoid(ad.add_bias(ad.matmul(h_e, model.head_med_w), model.head_med_b))
    v = ad.sigmoid(ad.add_bias(ad.matmul(h_e, model.head_lab_w), model.head_lab_b))
    return p, v, h_e


def inductive_embed(
    model: MedGcnModel, graph: MedGraph, new_ordinal: int
) -> tuple[np.ndarray, np.ndarray]:
    """Head outputs for one encounter from frozen weights.

    Encounters appended after training have no identity self-feature, so
    their representation comes entirely from their patient/lab/medication
    neighbors; trained encounters reproduce the training-time forward.
    """
    if not 0 <= new_ordinal < graph.n_encounters:
        raise GraphLookupError(
            f"encounter ordinal {new_ordinal} out of range 0..{graph.n_encounters - 1}"
        )
    p, v, _ = forward(model, graph, training=False)
    return p.values[new_ordinal].copy(), v.values[new_ordinal].copy()


def _weight_entries(model: MedGcnModel) -> list[tuple[str, Tensor]]:
    entries = []
    for k, layer in enumerate(model.layers):
        for t in TYPE_ORDER:
            entries.append((f"layer{k}/{t}", layer[t]))
    entries.append(("head_med/w", model.head_med_w))
    entries.append(("head_med/b", model.head_med_b))
    entries.append(("head_lab/w", model.head_lab_w))
    entries.append(("head_lab/b", model.head_lab_b))
    return entries


def model_to_bytes(model: MedGcnModel) -> bytes:
    """Checkpoint image: magic line, one-line JSON header, then weight
    matrices as row-major little-endian float64 in header order."""
    entries = _weight_entries(model)
    header = {
        "hyper": model.hyper.to_dict(),
        "trained_counts": model.trained_counts,
        "feat_dims": model.feat_dims,
        "graph_binding": model.graph_binding,
        "weights": [
            {"name": name, "rows": t.rows, "cols": t.cols} for name, t in entries
        ],
        "dtype": "<f8",
    }
    parts = [CHECKPOINT_MAGIC + b"\n", json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"]
    for _, t in entries:
        parts.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> MedGcnModel:
    newline = blob.find(b"\n")
    if newline < 0 or blob[:newline] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    header_end = blob.find(b"\n", newline + 1)
    if header_end < 0:
        raise CheckpointError("checkpoint truncated in header")
    try:
        header = json.loads(blob[newline + 1 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None

    hyper = Hyper.from_dict(header["hyper"])
    offset = header_end + 1
    weights: dict[str, Tensor] = {}
    for entry in header["weights"]:
        n = entry["rows"] * entry["cols"] * 8
        raw = blob[offset : offset + n]
        if len(raw) != n:
            raise CheckpointError(f"checkpoint truncated in weight {entry['name']}")
        weights[entry["name"]] = Tensor(
            np.frombuffer(raw, dtype="<f8").reshape(entry["rows"], entry["cols"]).copy(),
            requires_grad=True,
        )
        offset += n

    layers = []
    for k in range(hyper.n_layers):
        try:
            layers.append({t: weights[f"layer{k}/{t}"] for t in TYPE_ORDER})
        except KeyError as exc:
            raise CheckpointError(f"checkpoint missing weight {exc}") from None
    try:
        return MedGcnModel(
            hyper,
            layers,
            weights["head_med/w"],
            weights["head_med/b"],
            weights["head_lab/w"],
            weights["head_lab/b"],
            {k: int(v) for k, v in header["trained_counts"].items()},
            {k: int(v) for k, v in header["feat_dims"].items()},
            header["graph_binding"],
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing field {exc}") from None


def save_model(model: MedGcnModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> MedGcnModel:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    return model_from_bytes(blob)


def verify_model_graph(model: MedGcnModel, graph: MedGraph) -> None:
    """Checkpoint/graph compatibility: patients, labs, and medications must
    match exactly; encounters may have grown but the trained prefix must
    be identical."""
    binding = model.graph_binding
    shas = graph.type_shas()
    for t in (NodeType.PATIENT, NodeType.LAB, NodeType.MEDICATION):
        if binding["type_shas"][t.value] != shas[t.value]:
            raise CheckpointError(f"checkpoint was trained on different {t.value} nodes")
    n_trained = binding["n_encounters"]
    if graph.n_encounters < n_trained:
        raise CheckpointError(
            f"graph has {graph.n_encounters} encounters but checkpoint trained on {n_trained}"
        )
    if graph.encounter_prefix_sha(n_trained) != binding["type_shas"][ENCOUNTER]:
        raise CheckpointError("checkpoint was trained on different encounter nodes")


def clone_model(model: MedGcnModel) -> MedGcnModel:
    """Deep copy through the checkpoint image (shares nothing)."""
    out = model_from_bytes(model_to_bytes(model))
    return replace(out)
