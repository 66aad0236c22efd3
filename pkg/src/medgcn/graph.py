"""Typed medical entity graph: registries, adjacency matrices, splits.

Four node types (encounters, patients, labs, medications) and three
inter-type relations stored as dense matrices indexed by ordinals:

  a_ep  (N_E x N_P)  one-hot encounter-to-patient membership
  a_el  (N_E x N_L)  observed lab values normalized into [0, 1]
  m_el  (N_E x N_L)  observation mask; 1 marks a real measurement,
                     so an observed zero stays distinguishable from missing
  a_em  (N_E x N_M)  prescribed-medication indicators

Raw lab values are retained alongside the normalized matrix so that
normalization ranges can be refit from training-visible edges after a
split is chosen, keeping held-out values out of the statistics.

Within-type adjacency is an implicit identity: it is never stored and the
model realizes it as a self-term.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import GraphLookupError, IntegrityError, ParameterError, SplitError

MAGIC = b"MEDGRAPH1"

# Boundary arithmetic n * cumulative_ratio can land a hair under an integer
# in floating point; nudge before flooring.
_RATIO_EPS = 1e-9


class NodeType(str, Enum):
    ENCOUNTER = "encounter"
    PATIENT = "patient"
    LAB = "lab"
    MEDICATION = "medication"


NODE_TYPES = (NodeType.ENCOUNTER, NodeType.PATIENT, NodeType.LAB, NodeType.MEDICATION)


class NodeRegistry:
    """Ordered string-ID to dense-ordinal maps, one per node type."""

    def __init__(self):
        self._ids: dict[NodeType, list[str]] = {t: [] for t in NODE_TYPES}
        self._index: dict[NodeType, dict[str, int]] = {t: {} for t in NODE_TYPES}

    def add(self, node_type: NodeType, external_id: str) -> int:
        index = self._index[node_type]
        if external_id in index:
            raise IntegrityError(f"duplicate {node_type.value} id {external_id!r}")
        ordinal = len(self._ids[node_type])
        self._ids[node_type].append(external_id)
        index[external_id] = ordinal
        return ordinal

    def add_if_absent(self, node_type: NodeType, external_id: str) -> int:
        existing = self._index[node_type].get(external_id)
        if existing is not None:
            return existing
        return self.add(node_type, external_id)

    def ordinal(self, node_type: NodeType, external_id: str) -> int:
        try:
            return self._index[node_type][external_id]
        except KeyError:
            raise GraphLookupError(f"unknown {node_type.value} id {external_id!r}") from None

    def contains(self, node_type: NodeType, external_id: str) -> bool:
        return external_id in self._index[node_type]

    def id_at(self, node_type: NodeType, ordinal: int) -> str:
        ids = self._ids[node_type]
        if not 0 <= ordinal < len(ids):
            raise GraphLookupError(f"{node_type.value} ordinal {ordinal} out of range 0..{len(ids) - 1}")
        return ids[ordinal]

    def count(self, node_type: NodeType) -> int:
        return len(self._ids[node_type])

    def ids(self, node_type: NodeType) -> tuple[str, ...]:
        return tuple(self._ids[node_type])


def _sha256_lines(lines: Iterable[str]) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class MedGraph:
    """The assembled graph.  Immutable after build except add_encounter."""

    registry: NodeRegistry
    a_ep: np.ndarray
    a_el: np.ndarray
    m_el: np.ndarray
    a_em: np.ndarray
    raw_el: np.ndarray
    lab_norm: np.ndarray  # (N_L, 2) columns: training min, max in original units

    @property
    def n_encounters(self) -> int:
        return self.registry.count(NodeType.ENCOUNTER)

    @property
    def n_patients(self) -> int:
        return self.registry.count(NodeType.PATIENT)

    @property
    def n_labs(self) -> int:
        return self.registry.count(NodeType.LAB)

    @property
    def n_medications(self) -> int:
        return self.registry.count(NodeType.MEDICATION)

    def validate(self) -> None:
        n_e, n_p = self.n_encounters, self.n_patients
        n_l, n_m = self.n_labs, self.n_medications
        shapes = {
            "a_ep": (self.a_ep, (n_e, n_p)),
            "a_el": (self.a_el, (n_e, n_l)),
            "m_el": (self.m_el, (n_e, n_l)),
            "a_em": (self.a_em, (n_e, n_m)),
            "raw_el": (self.raw_el, (n_e, n_l)),
        }
        for name, (mat, want) in shapes.items():
            if mat.shape != want:
                raise IntegrityError(f"{name} shape {mat.shape} != registry counts {want}")
        if self.lab_norm.shape != (n_l, 2):
            raise IntegrityError(f"lab_norm shape {self.lab_norm.shape} != ({n_l}, 2)")
        if n_e:
            row_sums = self.a_ep.sum(axis=1)
            if not np.all(row_sums == 1.0) or not np.isin(self.a_ep, (0.0, 1.0)).all():
                raise IntegrityError("a_ep must be one-hot: exactly one patient per encounter")
        for name, mat in (("m_el", self.m_el), ("a_em", self.a_em)):
            if not np.isin(mat, (0.0, 1.0)).all():
                raise IntegrityError(f"{name} must be binary")
        if ((self.a_el < 0.0) | (self.a_el > 1.0)).any():
            raise IntegrityError("a_el entries must lie in [0, 1]")
        if np.any(self.a_el[self.m_el == 0.0] != 0.0):
            raise IntegrityError("a_el must be zero wherever m_el is zero")
        if np.any(self.raw_el[self.m_el == 0.0] != 0.0):
            raise IntegrityError("raw_el must be zero wherever m_el is zero")

    def fingerprint(self) -> str:
        """Hash of all registry ID lists; binds plans and views to a graph."""
        h = hashlib.sha256()
        for t in NODE_TYPES:
            h.update(_sha256_lines(self.registry.ids(t)).encode("ascii"))
        return h.hexdigest()

    def type_shas(self) -> dict[str, str]:
        """Per-type ID-list hashes, used by model checkpoints to validate a
        graph while tolerating encounters appended after training."""
        return {t.value: _sha256_lines(self.registry.ids(t)) for t in NODE_TYPES}

    def encounter_prefix_sha(self, n: int) -> str:
        if not 0 <= n <= self.n_encounters:
            raise GraphLookupError(f"encounter prefix {n} out of range 0..{self.n_encounters}")
        return _sha256_lines(self.registry.ids(NodeType.ENCOUNTER)[:n])

    def copy(self) -> "MedGraph":
        return MedGraph(
            registry=self.registry,
            a_ep=self.a_ep.copy(),
            a_el=self.a_el.copy(),
            m_el=self.m_el.copy(),
            a_em=self.a_em.copy(),
            raw_el=self.raw_el.copy(),
            lab_norm=self.lab_norm.copy(),
        )


def normalize_lab(value: float, lab: int, lab_norm: np.ndarray) -> float:
    """Map a raw lab value into [0, 1] using that lab's training range.

    Out-of-range values clamp; a degenerate range (min == max, including
    labs never observed in training) maps everything to 0.5.
    """
    if not 0 <= lab < lab_norm.shape[0]:
        raise GraphLookupError(f"lab ordinal {lab} out of range 0..{lab_norm.shape[0] - 1}")
    lo, hi = lab_norm[lab]
    if hi == lo:
        return 0.5
    return float(np.clip((value - lo) / (hi - lo), 0.0, 1.0))


def _fit_ranges(raw_el: np.ndarray, visible: np.ndarray, n_labs: int) -> np.ndarray:
    """Per-lab (min, max) over entries where visible == 1; unobserved labs
    get the degenerate (0, 0) range."""
    lab_norm = np.zeros((n_labs, 2))
    for j in range(n_labs):
        vals = raw_el[visible[:, j] == 1.0, j]
        if vals.size:
            lab_norm[j] = (vals.min(), vals.max())
    return lab_norm


def _normalize_matrix(raw_el: np.ndarray, m_el: np.ndarray, lab_norm: np.ndarray) -> np.ndarray:
    a_el = np.zeros_like(raw_el)
    for j in range(lab_norm.shape[0]):
        rows = m_el[:, j] == 1.0
        if rows.any():
            a_el[rows, j] = [normalize_lab(v, j, lab_norm) for v in raw_el[rows, j]]
    return a_el


def build_graph(
    patients: Sequence[str],
    encounters: Sequence[tuple[str, str]],
    lab_results: Sequence[tuple[str, str, float]],
    prescriptions: Sequence[tuple[str, str]],
) -> MedGraph:
    """Assemble a MedGraph from ingestion records.

    Registries fill in first-appearance order: patients and encounters from
    their own record streams, labs and medications as their codes first
    occur.  Initial normalization ranges cover every observation; callers
    that split afterwards should refit_lab_normalization to keep held-out
    values out of the ranges.
    """
    registry = NodeRegistry()
    for pid in patients:
        registry.add(NodeType.PATIENT, pid)
    for eid, pid in encounters:
        if not registry.contains(NodeType.PATIENT, pid):
            raise IntegrityError(f"encounter {eid!r} references unknown patient {pid!r}")
        registry.add(NodeType.ENCOUNTER, eid)

    n_e, n_p = registry.count(NodeType.ENCOUNTER), registry.count(NodeType.PATIENT)
    a_ep = np.zeros((n_e, n_p))
    for eid, pid in encounters:
        a_ep[registry.ordinal(NodeType.ENCOUNTER, eid), registry.ordinal(NodeType.PATIENT, pid)] = 1.0

    seen_lab_pairs: set[tuple[int, int]] = set()
    lab_triples: list[tuple[int, int, float]] = []
    for eid, lab_code, value in lab_results:
        if not registry.contains(NodeType.ENCOUNTER, eid):
            raise IntegrityError(f"lab result references unknown encounter {eid!r}")
        i = registry.ordinal(NodeType.ENCOUNTER, eid)
        j = registry.add_if_absent(NodeType.LAB, lab_code)
        if (i, j) in seen_lab_pairs:
            raise IntegrityError(f"duplicate lab observation for encounter {eid!r}, lab {lab_code!r}")
        seen_lab_pairs.add((i, j))
        lab_triples.append((i, j, float(value)))

    seen_med_pairs: set[tuple[int, int]] = set()
    med_pairs: list[tuple[int, int]] = []
    for eid, med_code in prescriptions:
        if not registry.contains(NodeType.ENCOUNTER, eid):
            raise IntegrityError(f"prescription references unknown encounter {eid!r}")
        i = registry.ordinal(NodeType.ENCOUNTER, eid)
        j = registry.add_if_absent(NodeType.MEDICATION, med_code)
        if (i, j) in seen_med_pairs:
            raise IntegrityError(f"duplicate prescription for encounter {eid!r}, medication {med_code!r}")
        seen_med_pairs.add((i, j))
        med_pairs.append((i, j))

    n_l, n_m = registry.count(NodeType.LAB), registry.count(NodeType.MEDICATION)
    raw_el = np.zeros((n_e, n_l))
    m_el = np.zeros((n_e, n_l))
    for i, j, value in lab_triples:
        raw_el[i, j] = value
        m_el[i, j] = 1.0
    a_em = np.zeros((n_e, n_m))
    for i, j in med_pairs:
        a_em[i, j] = 1.0

    lab_norm = _fit_ranges(raw_el, m_el, n_l)
    a_el = _normalize_matrix(raw_el, m_el, lab_norm)

    graph = MedGraph(registry, a_ep, a_el, m_el, a_em, raw_el, lab_norm)
    graph.validate()
    return graph


def assemble_graph(
    registry: NodeRegistry,
    a_ep: np.ndarray,
    raw_el: np.ndarray,
    m_el: np.ndarray,
    a_em: np.ndarray,
) -> MedGraph:
    """Build a MedGraph from prebuilt matrices, fitting lab ranges from the
    observed entries exactly as build_graph does."""
    n_l = registry.count(NodeType.LAB)
    raw_el = np.where(m_el == 1.0, raw_el, 0.0)
    lab_norm = _fit_ranges(raw_el, m_el, n_l)
    a_el = _normalize_matrix(raw_el, m_el, lab_norm)
    graph = MedGraph(registry, np.asarray(a_ep, dtype=np.float64), a_el, np.asarray(m_el, dtype=np.float64), np.asarray(a_em, dtype=np.float64), raw_el, lab_norm)
    graph.validate()
    return graph


MEDICATION_TASK = "medication"
IMPUTATION_TASK = "imputation"


@dataclass
class SplitPlan:
    """Deterministic partition of prediction targets for one task.

    Medication task: disjoint sets of encounter ordinals.
    Imputation task: disjoint sets of observed (encounter, lab) edges,
    stored as (n, 2) integer arrays.
    """

    task: str
    seed: int
    ratios: tuple[float, float, float]
    graph_sha: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def make_split(
    graph: MedGraph,
    task: str,
    ratios: tuple[float, float, float],
    seed: int,
) -> SplitPlan:
    """Shuffle targets under the seed and cut at cumulative ratio boundaries.

    Boundaries are floor(n * cumulative ratio), so 1260 encounters at
    (0.72, 0.08, 0.20) give 907 / 101 / 252.
    """
    if task not in (MEDICATION_TASK, IMPUTATION_TASK):
        raise ParameterError(f"unknown split task {task!r}")
    r = tuple(float(x) for x in ratios)
    if len(r) != 3 or any(x <= 0.0 for x in r):
        raise ParameterError(f"ratios must be three positive fractions, got {ratios}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must sum to 1, got sum {sum(r)}")

    if task == MEDICATION_TASK:
        items = np.arange(graph.n_encounters)
    else:
        items = np.argwhere(graph.m_el == 1.0)
    n = len(items)
    if n < 3:
        raise SplitError(f"need at least 3 items to split, got {n}")

    perm = np.random.default_rng(seed).permutation(n)
    c1 = int(n * r[0] + _RATIO_EPS)
    c2 = int(n * (r[0] + r[1]) + _RATIO_EPS)
    parts = [np.sort(perm[:c1]), np.sort(perm[c1:c2]), np.sort(perm[c2:])]
    train, val, test = (items[p] for p in parts)
    return SplitPlan(task, seed, r, graph.fingerprint(), train, val, test)


def _require_plan_match(graph: MedGraph, plan: SplitPlan) -> None:
    if plan.graph_sha != graph.fingerprint():
        raise IntegrityError("split plan was built from a different graph")


def apply_split_masking(graph: MedGraph, plan: SplitPlan) -> MedGraph:
    """Return a training view with held-out targets removed.

    Medication plans zero the a_em rows of val/test encounters; imputation
    plans zero a_el, raw_el, and m_el at val/test edges.  The input graph
    is left untouched; evaluation reads targets from it.
    """
    _require_plan_match(graph, plan)
    view = graph.copy()
    if plan.task == MEDICATION_TASK:
        for part in (plan.val, plan.test):
            view.a_em[part, :] = 0.0
    else:
        for part in (plan.val, plan.test):
            if len(part):
                view.a_el[part[:, 0], part[:, 1]] = 0.0
                view.raw_el[part[:, 0], part[:, 1]] = 0.0
                view.m_el[part[:, 0], part[:, 1]] = 0.0
    view.validate()
    return view


def refit_lab_normalization(graph: MedGraph, plan: Optional[SplitPlan] = None) -> MedGraph:
    """Recompute lab ranges from training-visible observations and
    renormalize a_el from raw values everywhere observed.

    With an imputation plan, only its train edges contribute to the ranges;
    without one (or for a medication plan) every observed edge does.
    Held-out entries keep their normalized targets under the refit ranges,
    which is what evaluation compares against.
    """
    out = graph.copy()
    if plan is not None:
        _require_plan_match(graph, plan)
    if plan is not None and plan.task == IMPUTATION_TASK:
        visible = np.zeros_like(graph.m_el)
        if len(plan.train):
            visible[plan.train[:, 0], plan.train[:, 1]] = 1.0
    else:
        visible = graph.m_el
    out.lab_norm = _fit_ranges(graph.raw_el, visible, graph.n_labs)
    out.a_el = _normalize_matrix(graph.raw_el, graph.m_el, out.lab_norm)
    out.validate()
    return out


@dataclass
class MatrixStats:
    name: str
    rows: int
    cols: int
    edges: int
    sparsity: float
    kind: str


@dataclass
class GraphStats:
    counts: dict[str, int]
    matrices: list[MatrixStats] = field(default_factory=list)

    def matrix(self, name: str) -> MatrixStats:
        for m in self.matrices:
            if m.name == name:
                return m
        raise GraphLookupError(f"no stats for matrix {name!r}")


def sparsity(rows: int, cols: int, edges: int) -> float:
    cells = rows * cols
    return 1.0 if cells == 0 else 1.0 - edges / cells


def graph_stats(graph: MedGraph) -> GraphStats:
    """Dimensions, edge counts, and sparsity per stored relation.

    Lab edges are counted from the mask (an observed zero is still an
    edge), matching how the lab matrix is populated.
    """
    n_e = graph.n_encounters
    stats = GraphStats(
        counts={t.value: graph.registry.count(t) for t in NODE_TYPES},
    )
    ep_edges = int(np.count_nonzero(graph.a_ep))
    el_edges = int(graph.m_el.sum())
    em_edges = int(np.count_nonzero(graph.a_em))
    stats.matrices.append(
        MatrixStats("a_ep", n_e, graph.n_patients, ep_edges, sparsity(n_e, graph.n_patients, ep_edges), "binary")
    )
    stats.matrices.append(
        MatrixStats("a_el", n_e, graph.n_labs, el_edges, sparsity(n_e, graph.n_labs, el_edges), "real")
    )
    stats.matrices.append(
        MatrixStats("a_em", n_e, graph.n_medications, em_edges, sparsity(n_e, graph.n_medications, em_edges), "binary")
    )
    return stats


def add_encounter(
    graph: MedGraph,
    patient_id: str,
    labs: Sequence[tuple[str, float]],
    encounter_id: Optional[str] = None,
) -> int:
    """Append one encounter in place and return its ordinal.

    Lab values normalize under the frozen training ranges (clamped); the
    medication row starts all zero.  Patient and labs must already exist.
    """
    p = graph.registry.ordinal(NodeType.PATIENT, patient_id)
    resolved: list[tuple[int, float]] = []
    seen: set[int] = set()
    for lab_id, value in labs:
        j = graph.registry.ordinal(NodeType.LAB, lab_id)
        if j in seen:
            raise IntegrityError(f"duplicate lab observation for new encounter, lab {lab_id!r}")
        seen.add(j)
        resolved.append((j, float(value)))

    if encounter_id is None:
        k = graph.n_encounters
        while graph.registry.contains(NodeType.ENCOUNTER, f"new-encounter-{k}"):
            k += 1
        encounter_id = f"new-encounter-{k}"
    ordinal = graph.registry.add(NodeType.ENCOUNTER, encounter_id)

    def grow(mat: np.ndarray) -> np.ndarray:
        return np.vstack([mat, np.zeros((1, mat.shape[1]))])

    graph.a_ep = grow(graph.a_ep)
    graph.a_el = grow(graph.a_el)
    graph.m_el = grow(graph.m_el)
    graph.a_em = grow(graph.a_em)
    graph.raw_el = grow(graph.raw_el)
    graph.a_ep[ordinal, p] = 1.0
    for j, value in resolved:
        graph.raw_el[ordinal, j] = value
        graph.m_el[ordinal, j] = 1.0
        graph.a_el[ordinal, j] = normalize_lab(value, j, graph.lab_norm)
    return ordinal


_MATRIX_ORDER = ("a_ep", "a_el", "m_el", "a_em", "raw_el")


def save_graph(graph: MedGraph, path) -> None:
    """Single-file format: magic line, one-line JSON header, then the five
    matrices as row-major little-endian float64 in fixed order."""
    graph.validate()
    header = {
        "counts": {t.value: graph.registry.count(t) for t in NODE_TYPES},
        "ids": {t.value: list(graph.registry.ids(t)) for t in NODE_TYPES},
        "lab_norm": graph.lab_norm.tolist(),
        "matrices": [
            {"name": name, "rows": getattr(graph, name).shape[0], "cols": getattr(graph, name).shape[1]}
            for name in _MATRIX_ORDER
        ],
        "dtype": "<f8",
    }
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        for name in _MATRIX_ORDER:
            f.write(np.ascontiguousarray(getattr(graph, name), dtype="<f8").tobytes())


def load_graph(path) -> MedGraph:
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != MAGIC:
            raise IntegrityError(f"not a graph file: bad magic {magic[:16]!r}")
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"corrupt graph header: {exc}") from None
        registry = NodeRegistry()
        for t in NODE_TYPES:
            for external_id in header["ids"][t.value]:
                registry.add(t, external_id)
        mats: dict[str, np.ndarray] = {}
        for entry in header["matrices"]:
            rows, cols = entry["rows"], entry["cols"]
            raw = f.read(rows * cols * 8)
            if len(raw) != rows * cols * 8:
                raise IntegrityError(f"graph file truncated in matrix {entry['name']}")
            mats[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
    lab_norm = np.array(header["lab_norm"], dtype=np.float64).reshape(registry.count(NodeType.LAB), 2)
    graph = MedGraph(
        registry,
        mats["a_ep"],
        mats["a_el"],
        mats["m_el"],
        mats["a_em"],
        mats["raw_el"],
        lab_norm,
    )
    graph.validate()
    return graph
