"""Junction-tree decomposition, cluster vocabulary, attachment enumeration, assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import networkx as nx

from .molgraph import Molecule, allowed_valences, canonical_code, canonical_ranks, parse_smiles

MAX_CANDIDATES = 64


class AssemblyError(RuntimeError):
    """Raised when a tree cannot be realized as a molecule."""


@dataclass(frozen=True)
class Cluster:
    atoms: tuple[int, ...]
    bonds: tuple[tuple[int, int], ...]
    label: int = -1

    @property
    def kind(self) -> str:
        if len(self.atoms) == 1:
            return "atom"
        if len(self.atoms) == 2 and len(self.bonds) == 1:
            return "bond"
        return "ring"


@dataclass
class JunctionTree:
    nodes: list[Cluster]
    edges: list[tuple[int, int]]
    root: int = 0
    mol: Molecule | None = None
    smiles: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.nodes]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return adj

    @property
    def labels(self) -> list[int]:
        return [c.label for c in self.nodes]

    def with_labels(self, vocab: ClusterVocab) -> JunctionTree:
        nodes = [Cluster(c.atoms, c.bonds, vocab[s]) for c, s in zip(self.nodes, self.smiles)]
        return JunctionTree(nodes, list(self.edges), self.root, self.mol, list(self.smiles))

    def rerooted(self, root: int) -> JunctionTree:
        return JunctionTree(list(self.nodes), list(self.edges), root, self.mol, list(self.smiles))

    def is_tree(self) -> bool:
        n = len(self.nodes)
        if n == 0 or len(self.edges) != n - 1:
            return False
        seen = {0}
        stack = [0]
        while stack:
            a = stack.pop()
            for b in self.adjacency[a]:
                if b not in seen:
                    seen.add(b)
                    stack.append(b)
        return len(seen) == n

    def dfs(self, child_key=None) -> tuple[list[int], list[int]]:
        """Preorder node list and parent array (root's parent is -1).

        Children are visited in ascending ``child_key(node)`` order, or by
        (label, canonical atom ranks) when no key is given.
        """
        if child_key is None:
            child_key = self.default_child_key()
        parent = [-1] * len(self.nodes)
        order: list[int] = []

        def visit(i: int, p: int):
            order.append(i)
            parent[i] = p
            for c in sorted((c for c in self.adjacency[i] if c != p), key=child_key):
                visit(c, i)

        visit(self.root, -1)
        return order, parent

    def default_child_key(self):
        ranks = canonical_ranks(self.mol) if self.mol is not None else None

        def key(i: int):
            atoms = self.nodes[i].atoms
            return (self.nodes[i].label, tuple(sorted(ranks[a] for a in atoms)) if ranks else atoms)

        return key


def _ring_clusters(m: Molecule) -> list[tuple[frozenset[int], frozenset[tuple[int, int]]]]:
    if not m.ring_bonds:
        return []
    g = nx.Graph()
    g.add_edges_from(m.ring_bonds)
    rings = []
    for cycle in nx.minimum_cycle_basis(g):
        atoms = frozenset(cycle)
        bonds = frozenset((i, j) for i, j in m.ring_bonds if i in atoms and j in atoms)
        rings.append((atoms, bonds))
    rings.sort(key=lambda r: sorted(r[0]))
    merged = True
    while merged:
        merged = False
        for x in range(len(rings)):
            for y in range(x + 1, len(rings)):
                if len(rings[x][0] & rings[y][0]) > 2:
                    rings[x] = (rings[x][0] | rings[y][0], rings[x][1] | rings[y][1])
                    del rings[y]
                    merged = True
                    break
            if merged:
                break
    return rings


def decompose(m: Molecule) -> JunctionTree:
    """Split ``m`` into ring, bond and singleton clusters joined by a spanning tree."""
    clusters: list[tuple[frozenset[int], frozenset[tuple[int, int]]]] = []
    clusters.extend(_ring_clusters(m))
    for i, j, _ in m.bonds:
        if (i, j) not in m.ring_bonds:
            clusters.append((frozenset((i, j)), frozenset({(i, j)})))
    clusters.sort(key=lambda c: sorted(c[0]))
    if not clusters:
        clusters = [(frozenset({0}), frozenset())]

    membership: dict[int, list[int]] = {}
    for k, (atoms, _) in enumerate(clusters):
        for a in atoms:
            membership.setdefault(a, []).append(k)
    hubs = sorted(a for a, ks in membership.items() if len(ks) >= 3)
    nbase = len(clusters)
    for a in hubs:
        clusters.append((frozenset({a}), frozenset()))
    hub_set = set(hubs)

    weighted = []
    for x in range(nbase):
        for y in range(x + 1, nbase):
            shared = clusters[x][0] & clusters[y][0]
            if shared and not shared <= hub_set:
                weighted.append((-len(shared), x, y))
    for k, a in enumerate(hubs):
        s = nbase + k
        for x in membership[a]:
            weighted.append((-1, x, s))
    weighted.sort()

    parent = list(range(len(clusters)))

    def find(u: int) -> int:
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    edges = []
    for _, x, y in weighted:
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[rx] = ry
            edges.append((x, y))

    nodes = [Cluster(tuple(sorted(a)), tuple(sorted(b))) for a, b in clusters]
    root = min(k for k, c in enumerate(nodes) if 0 in c.atoms)
    smiles = [cluster_smiles(m, c) for c in nodes]
    return JunctionTree(nodes, edges, root, m, smiles)


def cluster_fragment(m: Molecule, c: Cluster) -> tuple[Molecule, list[int]]:
    return m.subgraph(c.atoms, c.bonds)


def cluster_smiles(m: Molecule, c: Cluster) -> str:
    return cluster_fragment(m, c)[0].smiles


class ClusterVocab:
    """Sorted list of canonical cluster SMILES; position is the label."""

    def __init__(self, entries: Iterable[str]):
        self.entries = sorted(set(entries))
        self.index = {s: k for k, s in enumerate(self.entries)}
        self._frags: dict[int, Molecule] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, smiles: str) -> int:
        try:
            return self.index[smiles]
        except KeyError:
            raise KeyError(f"cluster {smiles!r} is not in the vocabulary") from None

    def __contains__(self, smiles: str) -> bool:
        return smiles in self.index

    def fragment(self, label: int) -> Molecule:
        frag = self._frags.get(label)
        if frag is None:
            frag = self._frags[label] = parse_smiles(self.entries[label])
        return frag

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.entries), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ClusterVocab:
        lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
        vocab = cls(ln for ln in lines if ln)
        if vocab.entries != [ln for ln in lines if ln]:
            raise ValueError(f"{path}: vocabulary file is not sorted/unique")
        return vocab

    @cached_property
    def compatible(self) -> list[list[bool]]:
        """``compatible[a][b]``: cluster ``b`` can in principle attach to cluster ``a``."""
        n = len(self)
        out = [[False] * n for _ in range(n)]
        for a in range(n):
            fa = self.fragment(a)
            for b in range(n):
                fb = self.fragment(b)
                probe = Assembly.start(fa, 0)
                out[a][b] = bool(_enumerate(probe, 0, 1, fb, limit=1))
        return out


def build_vocab(corpus: Iterable[Molecule]) -> ClusterVocab:
    entries = set()
    for m in corpus:
        entries.update(decompose(m).smiles)
    if not entries:
        raise ValueError("empty corpus")
    return ClusterVocab(entries)


# -- assembly ----------------------------------------------------------------


@dataclass(frozen=True)
class Assembly:
    """A partially assembled molecule with per-atom tree-node ownership."""

    mol: Molecule
    owners: tuple[frozenset[int], ...]
    node_atoms: dict[int, tuple[int, ...]]

    @classmethod
    def start(cls, frag: Molecule, node: int) -> Assembly:
        owners = tuple(frozenset({node}) for _ in frag.atoms)
        return cls(frag, owners, {node: tuple(range(len(frag.atoms)))})

    @cached_property
    def key(self) -> tuple:
        return canonical_code(self.mol, [",".join(map(str, sorted(o))) for o in self.owners])


@dataclass(frozen=True)
class AttachmentCandidate:
    node: int
    parent: int
    assembly: Assembly
    mapping: tuple[int, ...]  # fragment atom -> assembled atom

    @property
    def key(self) -> tuple:
        return self.assembly.key

    @property
    def graph(self) -> Molecule:
        return self.assembly.mol


def _enumerate(asm: Assembly, parent: int, node: int, frag: Molecule, limit: int = MAX_CANDIDATES) -> list[AttachmentCandidate]:
    mol = asm.mol
    targets = asm.node_atoms[parent]
    overlaps: list[dict[int, int]] = []
    for c in range(len(frag.atoms)):
        for a in targets:
            if frag.atoms[c].matches(mol.atoms[a]):
                overlaps.append({c: a})
    parent_is_ring = len(targets) >= 3  # clusters with three or more atoms are rings
    if parent_is_ring and len(frag.atoms) >= 3:
        tset = set(targets)
        for c1, c2, corder in frag.bonds:
            for a1, a2, aorder in mol.bonds:
                if a1 not in tset or a2 not in tset or aorder != corder:
                    continue
                for x, y in ((a1, a2), (a2, a1)):
                    if frag.atoms[c1].matches(mol.atoms[x]) and frag.atoms[c2].matches(mol.atoms[y]):
                        overlaps.append({c1: x, c2: y})

    found: dict[tuple, AttachmentCandidate] = {}
    for ov in overlaps:
        cand = _merge(asm, node, frag, ov, parent)
        if cand is not None and cand.key not in found:
            found[cand.key] = cand
    return [found[k] for k in sorted(found)][:limit]


def _merge(asm: Assembly, node: int, frag: Molecule, overlap: dict[int, int], parent: int) -> AttachmentCandidate | None:
    mol = asm.mol
    n0 = len(mol.atoms)
    mapping = []
    atoms = list(mol.atoms)
    nxt = n0
    for c, atom in enumerate(frag.atoms):
        if c in overlap:
            mapping.append(overlap[c])
        else:
            mapping.append(nxt)
            atoms.append(atom)
            nxt += 1
    bonds = list(mol.bonds)
    for c1, c2, order in frag.bonds:
        a1, a2 = mapping[c1], mapping[c2]
        existing = mol.bond(a1, a2) if (a1 < n0 and a2 < n0) else None
        if existing is not None:
            if existing != order:
                return None
            continue
        if a1 < n0 and a2 < n0:
            return None  # would close a new ring through existing atoms
        bonds.append((a1, a2, order))
    new = Molecule(tuple(atoms), tuple(bonds))
    for a in overlap.values():
        if _atom_violates(new, a):
            return None
    owners = list(asm.owners) + [frozenset()] * (nxt - n0)
    for a in mapping:
        owners[a] = owners[a] | {node}
    node_atoms = dict(asm.node_atoms)
    node_atoms[node] = tuple(mapping)
    return AttachmentCandidate(node, parent, Assembly(new, tuple(owners), node_atoms), tuple(mapping))


def _atom_violates(m: Molecule, i: int) -> bool:
    used, _ = m._valence_state(i)
    atom = m.atoms[i]
    return used > max(allowed_valences(atom.element, atom.charge))


def enumerate_attachments(
    tree: JunctionTree,
    node: int,
    assembled: Assembly,
    vocab: ClusterVocab,
    parent: int | None = None,
) -> list[AttachmentCandidate]:
    """Distinct valence-valid ways to fuse ``node``'s cluster onto its realized parent.

    Candidates are deduplicated by the canonical form of the assembled graph
    coloured by tree-node ownership, sorted by that form and capped.
    """
    if parent is None:
        _, parents = tree.dfs()
        parent = parents[node]
    if parent < 0 or parent not in assembled.node_atoms:
        raise AssemblyError(f"parent of node {node} has not been assembled")
    frag = vocab.fragment(tree.nodes[node].label)
    return _enumerate(assembled, parent, node, frag)


def assemble_with(tree: JunctionTree, vocab: ClusterVocab, choose, order: Sequence[int] | None = None, parents: Sequence[int] | None = None) -> Assembly:
    """Assemble ``tree`` in decode order, asking ``choose(node, candidates)`` for an index."""
    if order is None or parents is None:
        order, parents = tree.dfs()
    root = order[0]
    asm = Assembly.start(vocab.fragment(tree.nodes[root].label), root)
    for node in order[1:]:
        cands = enumerate_attachments(tree, node, asm, vocab, parents[node])
        if not cands:
            raise AssemblyError(f"no valid attachment for node {node}")
        k = choose(node, cands)
        if not 0 <= k < len(cands):
            raise AssemblyError(f"choice {k} out of range for node {node} ({len(cands)} candidates)")
        asm = cands[k].assembly
    return asm


def assemble(tree: JunctionTree, choices: dict[int, int] | Sequence[int], vocab: ClusterVocab) -> Molecule:
    """Realize ``tree`` picking ``choices[node]`` at every non-root node."""
    asm = assemble_with(tree, vocab, lambda node, cands: choices[node])
    return asm.mol.normalized()


# -- ground truth ------------------------------------------------------------


def truth_assembly(tree: JunctionTree, placed: Iterable[int]) -> Assembly:
    """The target molecule restricted to the clusters in ``placed``."""
    m = tree.mol
    assert m is not None
    placed = list(placed)
    atom_set: set[int] = set()
    bond_set: set[tuple[int, int]] = set()
    for k in placed:
        atom_set.update(tree.nodes[k].atoms)
        bond_set.update(tree.nodes[k].bonds)
    ids = sorted(atom_set)
    local = {a: i for i, a in enumerate(ids)}
    frag = Molecule(
        tuple(m.atoms[a] for a in ids),
        tuple((local[i], local[j], m.bond(i, j)) for i, j in sorted(bond_set)),
    ).normalized()
    owners = [set() for _ in ids]
    node_atoms = {}
    for k in placed:
        node_atoms[k] = tuple(local[a] for a in tree.nodes[k].atoms)
        for a in tree.nodes[k].atoms:
            owners[local[a]].add(k)
    return Assembly(frag, tuple(frozenset(o) for o in owners), node_atoms)


@dataclass
class AssemblyStep:
    node: int
    parent: int
    candidates: list[AttachmentCandidate]
    truth: int


def ground_truth_steps(tree: JunctionTree, vocab: ClusterVocab, order: Sequence[int] | None = None, parents: Sequence[int] | None = None) -> list[AssemblyStep]:
    """Candidates and the index of the true attachment at every non-root node."""
    if order is None or parents is None:
        order, parents = tree.dfs()
    steps = []
    for t in range(1, len(order)):
        node = order[t]
        before = truth_assembly(tree, order[:t])
        after = truth_assembly(tree, order[: t + 1])
        cands = enumerate_attachments(tree, node, before, vocab, parents[node])
        keys = [c.key for c in cands]
        if after.key not in keys:
            raise AssemblyError(f"ground-truth attachment of node {node} not among {len(cands)} candidates")
        steps.append(AssemblyStep(node, parents[node], cands, keys.index(after.key)))
    return steps


def ground_truth_choices(tree: JunctionTree, vocab: ClusterVocab) -> dict[int, int]:
    return {s.node: s.truth for s in ground_truth_steps(tree, vocab)}
