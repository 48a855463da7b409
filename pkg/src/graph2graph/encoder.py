"""Message-passing encoders for molecular graphs and junction trees.

Inputs are precomputed as small numpy index tables per molecule (``GraphSpec``,
``TreeSpec``) and collated into one flat batch. Directed messages live in a
table whose row 0 is a permanent zero pad.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .junctree import JunctionTree
from .molgraph import ELEMENTS, BondOrder, Molecule
from .tensorcore import Dense, TreeGRU

CHARGES = (-1, 0, 1)
MAX_DEGREE = 5
ATOM_FDIM = len(ELEMENTS) + len(CHARGES) + MAX_DEGREE + 1
BOND_FDIM = len(BondOrder)


def atom_features(m: Molecule, i: int) -> np.ndarray:
    atom = m.atoms[i]
    f = np.zeros(ATOM_FDIM, dtype=np.float32)
    try:
        f[ELEMENTS.index(atom.element)] = 1.0
    except ValueError:
        raise ValueError(f"element {atom.element!r} is outside the feature table") from None
    if atom.charge not in CHARGES:
        raise ValueError(f"charge {atom.charge} is outside the feature table")
    f[len(ELEMENTS) + CHARGES.index(atom.charge)] = 1.0
    f[len(ELEMENTS) + len(CHARGES) + min(m.degree(i), MAX_DEGREE)] = 1.0
    return f


def bond_features(order: BondOrder) -> np.ndarray:
    f = np.zeros(BOND_FDIM, dtype=np.float32)
    f[int(order) - 1] = 1.0
    return f


def _incoming_tables(n: int, edges: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """For directed ``edges`` (1-based rows), return per-edge and per-node inbound tables.

    ``bgraph[e]`` lists edges w->u for the edge u->v (excluding v->u);
    ``agraph[u]`` lists every edge into u. Zeros pad.
    """
    into: list[list[int]] = [[] for _ in range(n)]
    for k, (_, v) in enumerate(edges, start=1):
        into[v].append(k)
    width = max([len(x) for x in into] + [1])
    agraph = np.zeros((n, width), dtype=np.int64)
    for u, lst in enumerate(into):
        agraph[u, : len(lst)] = lst
    bgraph = np.zeros((len(edges), width), dtype=np.int64)
    for k, (u, v) in enumerate(edges):
        lst = [e for e in into[u] if edges[e - 1][0] != v]
        bgraph[k, : len(lst)] = lst
    return bgraph, agraph


@dataclass
class GraphSpec:
    """Index tables for one molecular graph (local numbering, edge rows 1-based)."""

    fatoms: np.ndarray
    fbonds: np.ndarray
    edges: list[tuple[int, int]]
    bgraph: np.ndarray
    agraph: np.ndarray
    inject: list = field(default_factory=list)  # per edge: tree edge key or None

    @property
    def n_atoms(self) -> int:
        return len(self.fatoms)

    @classmethod
    def from_molecule(cls, m: Molecule, alpha: list[int] | None = None) -> GraphSpec:
        fatoms = np.stack([atom_features(m, i) for i in range(len(m.atoms))])
        edges, fb, inject = [], [], []
        for i, j, order in m.bonds:
            for u, v in ((i, j), (j, i)):
                edges.append((u, v))
                fb.append(bond_features(order))
                inject.append(None if alpha is None or alpha[u] == alpha[v] else (alpha[u], alpha[v]))
        fbonds = np.stack(fb) if fb else np.zeros((0, BOND_FDIM), dtype=np.float32)
        bgraph, agraph = _incoming_tables(len(m.atoms), edges)
        return cls(fatoms, fbonds, edges, bgraph, agraph, inject)


@dataclass
class TreeSpec:
    labels: list[int]
    edges: list[tuple[int, int]]
    bgraph: np.ndarray
    agraph: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @classmethod
    def from_tree(cls, t: JunctionTree) -> TreeSpec:
        edges = []
        for a, b in t.edges:
            edges += [(a, b), (b, a)]
        bgraph, agraph = _incoming_tables(len(t.nodes), edges)
        labels = t.labels
        if any(lab < 0 for lab in labels):
            raise ValueError("tree has unlabelled clusters")
        return cls(list(labels), edges, bgraph, agraph)


def _stack_tables(tables: list[np.ndarray], offsets: list[int]) -> np.ndarray:
    width = max(t.shape[1] for t in tables)
    rows = sum(t.shape[0] for t in tables)
    out = np.zeros((rows, width), dtype=np.int64)
    r = 0
    for t, off in zip(tables, offsets):
        out[r : r + len(t), : t.shape[1]] = np.where(t > 0, t + off, 0)
        r += len(t)
    return out


def _scope(sizes: list[int]) -> torch.Tensor:
    return torch.repeat_interleave(torch.arange(len(sizes)), torch.tensor(sizes, dtype=torch.int64))


@dataclass
class GraphBatch:
    fatoms: torch.Tensor  # [N, ATOM_FDIM]
    fsrc: torch.Tensor  # [E+1, ATOM_FDIM] features of each edge's source atom
    fbonds: torch.Tensor  # [E+1, BOND_FDIM]
    bgraph: torch.Tensor  # [E+1, K]
    agraph: torch.Tensor  # [N, K]
    owner: torch.Tensor  # [N] graph index of each atom
    sizes: list[int]
    edge_rows: list[dict[tuple[int, int], int]]
    inject: torch.Tensor | None = None  # [E+1] rows into an external tree-message table

    @property
    def n_graphs(self) -> int:
        return len(self.sizes)


def collate_graphs(specs: list[GraphSpec], inject_rows: list[dict] | None = None) -> GraphBatch:
    """Concatenate graph specs; ``inject_rows[g]`` maps a spec's tree-edge keys to message rows."""
    dtype = torch.get_default_dtype()
    atom_off, edge_off = [], []
    a = 0
    e = 0
    for s in specs:
        atom_off.append(a)
        edge_off.append(e)
        a += s.n_atoms
        e += len(s.edges)
    fatoms = np.concatenate([s.fatoms for s in specs])
    fsrc = np.zeros((e + 1, ATOM_FDIM), dtype=np.float32)
    fbonds = np.zeros((e + 1, BOND_FDIM), dtype=np.float32)
    inject = np.zeros(e + 1, dtype=np.int64)
    edge_rows = []
    for g, (s, ao, eo) in enumerate(zip(specs, atom_off, edge_off)):
        rows = {}
        for k, (u, v) in enumerate(s.edges):
            fsrc[eo + k + 1] = s.fatoms[u]
            fbonds[eo + k + 1] = s.fbonds[k]
            rows[(u, v)] = eo + k + 1
            if inject_rows is not None and s.inject[k] is not None:
                inject[eo + k + 1] = inject_rows[g].get(s.inject[k], 0)
        edge_rows.append(rows)
    pad = [np.zeros((1, 1), dtype=np.int64)]
    bgraph = _stack_tables(pad + [s.bgraph for s in specs], [0] + edge_off)
    agraph = _stack_tables([s.agraph for s in specs], edge_off)
    return GraphBatch(
        torch.from_numpy(fatoms).to(dtype),
        torch.from_numpy(fsrc).to(dtype),
        torch.from_numpy(fbonds).to(dtype),
        torch.from_numpy(bgraph),
        torch.from_numpy(agraph),
        _scope([s.n_atoms for s in specs]),
        [s.n_atoms for s in specs],
        edge_rows,
        torch.from_numpy(inject) if inject_rows is not None else None,
    )


@dataclass
class TreeBatch:
    labels: torch.Tensor  # [N]
    fnodes: torch.Tensor  # [N, V] one-hot
    fsrc: torch.Tensor  # [E+1, V]
    bgraph: torch.Tensor
    agraph: torch.Tensor
    owner: torch.Tensor
    sizes: list[int]
    edge_rows: list[dict[tuple[int, int], int]]


def collate_trees(specs: list[TreeSpec], vocab_size: int) -> TreeBatch:
    dtype = torch.get_default_dtype()
    labels = [lab for s in specs for lab in s.labels]
    if any(not 0 <= lab < vocab_size for lab in labels):
        raise ValueError("cluster label outside the vocabulary")
    lab = torch.tensor(labels, dtype=torch.int64)
    fnodes = torch.zeros(len(labels), vocab_size, dtype=dtype)
    fnodes[torch.arange(len(labels)), lab] = 1.0
    node_off, edge_off = [], []
    n = e = 0
    src_rows = [0]
    edge_rows = []
    for s in specs:
        node_off.append(n)
        edge_off.append(e)
        rows = {}
        for k, (u, v) in enumerate(s.edges):
            rows[(u, v)] = e + k + 1
            src_rows.append(n + u)
        edge_rows.append(rows)
        n += s.n_nodes
        e += len(s.edges)
    fsrc = fnodes[torch.tensor(src_rows)]
    fsrc[0] = 0.0
    pad = [np.zeros((1, 1), dtype=np.int64)]
    bgraph = _stack_tables(pad + [s.bgraph for s in specs], [0] + edge_off)
    agraph = _stack_tables([s.agraph for s in specs], edge_off)
    return TreeBatch(
        lab,
        fnodes,
        fsrc,
        torch.from_numpy(bgraph),
        torch.from_numpy(agraph),
        _scope([s.n_nodes for s in specs]),
        [s.n_nodes for s in specs],
        edge_rows,
    )


class GraphMPN(nn.Module):
    """Loopy bond-level message passing; optional tree-message injection per edge."""

    def __init__(self, hidden: int, depth: int):
        super().__init__()
        self.depth = depth
        self.W1 = Dense(ATOM_FDIM, hidden)
        self.W2 = Dense(BOND_FDIM, hidden)
        self.W3 = Dense(hidden, hidden)
        self.U1 = Dense(ATOM_FDIM, hidden)
        self.U2 = Dense(hidden, hidden)

    def forward(self, g: GraphBatch, tree_msgs: torch.Tensor | None = None) -> torch.Tensor:
        base = self.W1(g.fsrc) + self.W2(g.fbonds)
        live = torch.ones(base.shape[0], 1, dtype=base.dtype)
        live[0] = 0.0
        extra = None
        if g.inject is not None and tree_msgs is not None:
            extra = tree_msgs[g.inject]
        msgs = torch.zeros_like(base)
        for _ in range(self.depth):
            nei = msgs[g.bgraph].sum(dim=1)
            if extra is not None:
                nei = nei + extra
            msgs = torch.relu(base + self.W3(nei)) * live
        return torch.relu(self.U1(g.fatoms) + self.U2(msgs[g.agraph].sum(dim=1)))


class TreeMPN(nn.Module):
    """Tree message passing with a tree GRU; returns node vectors and directed messages."""

    def __init__(self, vocab_size: int, hidden: int, depth: int):
        super().__init__()
        self.depth = depth
        self.gru = TreeGRU(vocab_size, hidden)
        self.U1 = Dense(vocab_size, hidden)
        self.U2 = Dense(hidden, hidden)

    def forward(self, t: TreeBatch) -> tuple[torch.Tensor, torch.Tensor]:
        n_rows = t.fsrc.shape[0]
        live = torch.ones(n_rows, 1, dtype=t.fsrc.dtype)
        live[0] = 0.0
        msgs = torch.zeros(n_rows, self.gru.hidden, dtype=t.fsrc.dtype)
        for _ in range(self.depth):
            msgs = self.gru(t.fsrc, msgs[t.bgraph]) * live
        vecs = torch.relu(self.U1(t.fnodes) + self.U2(msgs[t.agraph].sum(dim=1)))
        return vecs, msgs


@dataclass
class Encoded:
    """Batched source encodings: flat vectors plus per-molecule sizes."""

    tree_vecs: torch.Tensor
    tree_owner: torch.Tensor
    tree_sizes: list[int]
    graph_vecs: torch.Tensor
    graph_owner: torch.Tensor
    graph_sizes: list[int]
    tree_msgs: torch.Tensor
    tree_edge_rows: list[dict[tuple[int, int], int]]

    @property
    def batch_size(self) -> int:
        return len(self.tree_sizes)

    def tree_sum(self) -> torch.Tensor:
        return segment_sum(self.tree_vecs, self.tree_owner, self.batch_size)

    def graph_sum(self) -> torch.Tensor:
        return segment_sum(self.graph_vecs, self.graph_owner, self.batch_size)

    def padded(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        xt, mt = pad_segments(self.tree_vecs, self.tree_sizes)
        xg, mg = pad_segments(self.graph_vecs, self.graph_sizes)
        return xt, mt, xg, mg

    def with_vectors(self, tree_vecs: torch.Tensor, graph_vecs: torch.Tensor) -> Encoded:
        return Encoded(tree_vecs, self.tree_owner, self.tree_sizes, graph_vecs, self.graph_owner, self.graph_sizes, self.tree_msgs, self.tree_edge_rows)

    def item(self, b: int) -> EncodedSource:
        t0 = sum(self.tree_sizes[:b])
        g0 = sum(self.graph_sizes[:b])
        rows = self.tree_edge_rows[b]
        return EncodedSource(
            self.tree_vecs[t0 : t0 + self.tree_sizes[b]],
            self.graph_vecs[g0 : g0 + self.graph_sizes[b]],
            {k: self.tree_msgs[r] for k, r in rows.items()},
        )


@dataclass
class EncodedSource:
    tree_vecs: torch.Tensor
    graph_vecs: torch.Tensor
    tree_messages: dict[tuple[int, int], torch.Tensor]


def segment_sum(x: torch.Tensor, owner: torch.Tensor, n: int) -> torch.Tensor:
    out = torch.zeros(n, x.shape[1], dtype=x.dtype)
    return out.index_add(0, owner, x)


def pad_segments(x: torch.Tensor, sizes: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(sizes)
    out = x.new_zeros(len(sizes), width, x.shape[1])
    mask = torch.zeros(len(sizes), width, dtype=torch.bool)
    rows = torch.repeat_interleave(torch.arange(len(sizes)), torch.tensor(sizes))
    cols = torch.cat([torch.arange(s) for s in sizes])
    out = out.index_put((rows, cols), x)
    mask[rows, cols] = True
    return out, mask


class Encoder(nn.Module):
    """Shared tree and graph encoder (the same weights embed sources and targets)."""

    def __init__(self, vocab_size: int, hidden: int, tree_depth: int = 6, graph_depth: int = 3):
        super().__init__()
        self.vocab_size = vocab_size
        self.tree = TreeMPN(vocab_size, hidden, tree_depth)
        self.graph = GraphMPN(hidden, graph_depth)

    def forward(self, trees: TreeBatch, graphs: GraphBatch) -> Encoded:
        tv, msgs = self.tree(trees)
        gv = self.graph(graphs)
        return Encoded(tv, trees.owner, trees.sizes, gv, graphs.owner, graphs.sizes, msgs, trees.edge_rows)

    def encode(self, trees: list[JunctionTree], mols: list[Molecule]) -> Encoded:
        tb = collate_trees([TreeSpec.from_tree(t) for t in trees], self.vocab_size)
        gb = collate_graphs([GraphSpec.from_molecule(m) for m in mols])
        return self(tb, gb)
