"""Molecular graphs: SMILES I/O, canonical ordering, valence rules, fingerprints."""

from __future__ import annotations

import enum
import hashlib
import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

log = logging.getLogger(__name__)


class BondOrder(enum.IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> int:
        return 1 if self is BondOrder.AROMATIC else int(self)


ELEMENTS = ("C", "N", "O", "S", "P", "F", "Cl", "Br", "I")
AROMATIC_ELEMENTS = ("C", "N", "O", "S", "P")
BASE_VALENCES = {
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "S": (2, 4, 6),
    "P": (3, 5),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}


def allowed_valences(element: str, charge: int) -> tuple[int, ...]:
    """Valences permitted for ``element`` carrying formal ``charge``."""
    if element == "C":
        return (4 - abs(charge),)
    vals = tuple(v + charge for v in BASE_VALENCES[element] if v + charge >= 0)
    return vals or (0,)


class SmilesError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class SmilesSyntaxError(SmilesError):
    pass


class RingClosureError(SmilesError):
    pass


class UnsupportedFeatureError(SmilesError):
    pass


class ValenceError(SmilesError):
    pass


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    hs: int = 0  # explicit hydrogens beyond what the valence rules imply
    aromatic: bool = False

    def matches(self, other: Atom) -> bool:
        return (self.element, self.charge, self.hs, self.aromatic) == (
            other.element,
            other.charge,
            other.hs,
            other.aromatic,
        )


@dataclass(frozen=True)
class Violation:
    atom: int
    used: int
    allowed: int


@dataclass(frozen=True)
class Molecule:
    """Undirected attributed graph; bonds are stored as ``(i, j, order)`` with ``i < j``."""

    atoms: tuple[Atom, ...]
    bonds: tuple[tuple[int, int, BondOrder], ...] = ()

    def __post_init__(self):
        atoms = tuple(self.atoms)
        seen = set()
        norm = []
        for i, j, order in self.bonds:
            if i == j:
                raise ValueError(f"self bond on atom {i}")
            if not (0 <= i < len(atoms) and 0 <= j < len(atoms)):
                raise ValueError(f"bond ({i}, {j}) references a missing atom")
            a, b = (i, j) if i < j else (j, i)
            if (a, b) in seen:
                raise ValueError(f"duplicate bond ({a}, {b})")
            seen.add((a, b))
            norm.append((a, b, BondOrder(order)))
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "bonds", tuple(norm))

    def __len__(self) -> int:
        return len(self.atoms)

    @cached_property
    def neighbors(self) -> tuple[tuple[tuple[int, BondOrder], ...], ...]:
        nbrs: list[list[tuple[int, BondOrder]]] = [[] for _ in self.atoms]
        for i, j, order in self.bonds:
            nbrs[i].append((j, order))
            nbrs[j].append((i, order))
        return tuple(tuple(n) for n in nbrs)

    @cached_property
    def bond_index(self) -> dict[tuple[int, int], BondOrder]:
        out = {}
        for i, j, order in self.bonds:
            out[(i, j)] = order
            out[(j, i)] = order
        return out

    def bond(self, i: int, j: int) -> BondOrder | None:
        return self.bond_index.get((i, j))

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def is_connected(self) -> bool:
        if not self.atoms:
            return False
        seen = {0}
        stack = [0]
        while stack:
            a = stack.pop()
            for b, _ in self.neighbors[a]:
                if b not in seen:
                    seen.add(b)
                    stack.append(b)
        return len(seen) == len(self.atoms)

    @cached_property
    def ring_bonds(self) -> frozenset[tuple[int, int]]:
        """Bonds lying on at least one cycle (i.e. bonds that are not bridges)."""
        n = len(self.atoms)
        disc = [-1] * n
        low = [0] * n
        bridges = set()
        timer = 0
        for root in range(n):
            if disc[root] >= 0:
                continue
            disc[root] = low[root] = timer
            timer += 1
            stack = [(root, -1, iter(self.neighbors[root]))]
            while stack:
                v, parent, it = stack[-1]
                advanced = False
                for w, _ in it:
                    if w == parent:
                        continue
                    if disc[w] < 0:
                        disc[w] = low[w] = timer
                        timer += 1
                        stack.append((w, v, iter(self.neighbors[w])))
                        advanced = True
                        break
                    low[v] = min(low[v], disc[w])
                if advanced:
                    continue
                stack.pop()
                if parent >= 0:
                    low[parent] = min(low[parent], low[v])
                    if low[v] > disc[parent]:
                        bridges.add((min(v, parent), max(v, parent)))
        return frozenset((i, j) for i, j, _ in self.bonds if (i, j) not in bridges)

    @cached_property
    def ring_atoms(self) -> frozenset[int]:
        return frozenset(a for bond in self.ring_bonds for a in bond)

    # -- hydrogens and valence ---------------------------------------------

    def _valence_state(self, i: int, hs: int | None = None) -> tuple[int, int]:
        """Return ``(used, base)`` valence for atom ``i``.

        ``base`` counts bonds (aromatic as 1) plus explicit hydrogens; ``used``
        adds the aromatic pi contribution. Aromatic carbon always needs its pi
        unless it carries an exocyclic double bond; aromatic heteroatoms take
        one only when it fits within their lowest valence.
        """
        atom = self.atoms[i]
        hs = atom.hs if hs is None else hs
        base = hs
        has_double = False
        for _, order in self.neighbors[i]:
            base += order.valence
            has_double |= order is BondOrder.DOUBLE
        pi = 0
        if atom.aromatic:
            if atom.element == "C":
                pi = 0 if has_double else 1
            elif base + 1 <= min(allowed_valences(atom.element, atom.charge)):
                pi = 1
        return base + pi, base

    def implicit_hs(self, i: int, hs: int | None = None) -> int:
        atom = self.atoms[i]
        used, _ = self._valence_state(i, hs)
        for v in allowed_valences(atom.element, atom.charge):
            if v >= used:
                return v - used
        return 0

    def total_hs(self, i: int) -> int:
        return self.atoms[i].hs + self.implicit_hs(i)

    def normalized(self) -> Molecule:
        """Rewrite explicit hydrogen counts into their minimal equivalent form."""
        atoms = list(self.atoms)
        changed = False
        for i, atom in enumerate(self.atoms):
            if atom.hs == 0:
                continue
            total = self.total_hs(i)
            cand = max(0, total - self.implicit_hs(i, 0))
            if cand != atom.hs and cand + self.implicit_hs(i, cand) == total:
                atoms[i] = Atom(atom.element, atom.charge, cand, atom.aromatic)
                changed = True
        return Molecule(tuple(atoms), self.bonds) if changed else self

    # -- derived graphs ----------------------------------------------------

    def subgraph(self, atom_ids: Iterable[int], bonds: Iterable[tuple[int, int]] | None = None) -> tuple[Molecule, list[int]]:
        """Fragment induced on ``atom_ids`` (or only the given ``bonds``).

        Returns the fragment and the list mapping fragment index -> parent index.
        """
        ids = sorted(set(atom_ids))
        local = {a: k for k, a in enumerate(ids)}
        if bonds is None:
            chosen = [(i, j, o) for i, j, o in self.bonds if i in local and j in local]
        else:
            chosen = [(i, j, self.bond(i, j)) for i, j in bonds]
        frag = Molecule(
            tuple(self.atoms[a] for a in ids),
            tuple((local[i], local[j], o) for i, j, o in chosen),
        )
        return frag.normalized(), ids

    def permuted(self, perm: Sequence[int]) -> Molecule:
        """Relabel atom ``i`` as ``perm[i]``."""
        atoms: list[Atom | None] = [None] * len(self.atoms)
        for i, atom in enumerate(self.atoms):
            atoms[perm[i]] = atom
        bonds = tuple((perm[i], perm[j], o) for i, j, o in self.bonds)
        return Molecule(tuple(atoms), bonds)  # type: ignore[arg-type]

    @cached_property
    def smiles(self) -> str:
        return write_smiles(self)


def check_valence(m: Molecule) -> list[Violation]:
    out = []
    for i, atom in enumerate(m.atoms):
        used, _ = m._valence_state(i)
        cap = max(allowed_valences(atom.element, atom.charge))
        if used > cap:
            out.append(Violation(i, used, cap))
    return out


# -- parsing -----------------------------------------------------------------

_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}
_ORGANIC_TWO = ("Cl", "Br")
_ORGANIC_ONE = {"C", "N", "O", "S", "P", "F", "I"}
_AROMATIC_ONE = {"c": "C", "n": "N", "o": "O", "s": "S", "p": "P"}


def parse_smiles(text: str) -> Molecule:
    """Parse a single-fragment SMILES string.

    Stereo markers are dropped with a warning; isotopes, atom classes,
    wildcards and multi-fragment input raise. The result is checked against
    the valence table.
    """
    s = text.strip()
    if not s:
        raise SmilesSyntaxError("empty SMILES", 0)
    atoms: list[Atom] = []
    bracket_h: dict[int, int] = {}
    bonds: dict[tuple[int, int], BondOrder | None] = {}
    branch: list[int] = []
    rings: dict[int, tuple[int, BondOrder | None, int]] = {}
    prev: int | None = None
    pending: BondOrder | None = None
    pending_pos = 0
    stereo_warned = False
    pos = 0

    def add_bond(a: int, b: int, order: BondOrder | None, where: int):
        key = (min(a, b), max(a, b))
        if a == b or key in bonds:
            raise SmilesSyntaxError(f"duplicate or self bond between atoms {a} and {b}", where)
        bonds[key] = order

    def add_atom(atom: Atom, where: int):
        nonlocal prev, pending
        idx = len(atoms)
        atoms.append(atom)
        if prev is not None:
            add_bond(prev, idx, pending, where)
        elif pending is not None:
            raise SmilesSyntaxError("bond symbol without a preceding atom", pending_pos)
        prev = idx
        pending = None
        return idx

    while pos < len(s):
        ch = s[pos]
        if ch == "(":
            if prev is None:
                raise SmilesSyntaxError("branch opened before any atom", pos)
            branch.append(prev)
            pos += 1
        elif ch == ")":
            if not branch:
                raise SmilesSyntaxError("unbalanced ')'", pos)
            if pending is not None:
                raise SmilesSyntaxError("dangling bond before ')'", pos)
            prev = branch.pop()
            pos += 1
        elif ch in _BOND_SYMBOLS or ch in "/\\":
            if pending is not None:
                raise SmilesSyntaxError("two consecutive bond symbols", pos)
            if ch in "/\\":
                if not stereo_warned:
                    log.warning("stripping stereo bond markers from %r", s)
                    stereo_warned = True
                pending = BondOrder.SINGLE
            else:
                pending = _BOND_SYMBOLS[ch]
            pending_pos = pos
            pos += 1
        elif ch == ".":
            raise UnsupportedFeatureError("multi-fragment SMILES are not supported", pos)
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                digits = s[pos + 1 : pos + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesSyntaxError("'%' must be followed by two digits", pos)
                num, width = int(digits), 3
            else:
                num, width = int(ch), 1
            if prev is None:
                raise SmilesSyntaxError("ring closure before any atom", pos)
            if num in rings:
                other, order, opos = rings.pop(num)
                if pending is not None and order is not None and pending != order:
                    raise RingClosureError(f"conflicting bond symbols on ring closure {num}", pos)
                add_bond(other, prev, pending if pending is not None else order, pos)
            else:
                rings[num] = (prev, pending, pos)
            pending = None
            pos += width
        elif ch == "[":
            end = s.find("]", pos)
            if end < 0:
                raise SmilesSyntaxError("unterminated bracket atom", pos)
            atom, hcount, warned = _parse_bracket(s[pos + 1 : end], pos + 1)
            if warned and not stereo_warned:
                log.warning("stripping chirality markers from %r", s)
                stereo_warned = True
            idx = add_atom(atom, pos)
            bracket_h[idx] = hcount
            pos = end + 1
        elif s.startswith(_ORGANIC_TWO, pos):
            add_atom(Atom(s[pos : pos + 2]), pos)
            pos += 2
        elif ch in _ORGANIC_ONE:
            add_atom(Atom(ch), pos)
            pos += 1
        elif ch in _AROMATIC_ONE:
            add_atom(Atom(_AROMATIC_ONE[ch], aromatic=True), pos)
            pos += 1
        elif ch in "*bB":
            raise UnsupportedFeatureError(f"unsupported atom {ch!r}", pos)
        else:
            raise SmilesSyntaxError(f"unexpected character {ch!r}", pos)

    if rings:
        num, (_, _, opos) = next(iter(rings.items()))
        raise RingClosureError(f"unmatched ring closure {num}", opos)
    if branch:
        raise SmilesSyntaxError("unbalanced '('", len(s))
    if pending is not None:
        raise SmilesSyntaxError("dangling bond at end of input", pending_pos)

    resolved = []
    for (a, b), order in bonds.items():
        if order is None:
            order = BondOrder.AROMATIC if atoms[a].aromatic and atoms[b].aromatic else BondOrder.SINGLE
        resolved.append((a, b, order))
    mol = Molecule(tuple(atoms), tuple(resolved))
    if bracket_h:
        mol = _apply_bracket_hydrogens(mol, bracket_h, s)
    bad = check_valence(mol)
    if bad:
        v = bad[0]
        raise ValenceError(f"atom {v.atom} ({mol.atoms[v.atom].element}) has valence {v.used} > {v.allowed}")
    return mol


def _parse_bracket(body: str, offset: int) -> tuple[Atom, int, bool]:
    pos = 0
    if body[:1].isdigit():
        raise UnsupportedFeatureError("isotopes are not supported", offset)
    aromatic = False
    if body[:2] in ("Cl", "Br"):
        element, pos = body[:2], 2
    elif body[:1] in _ORGANIC_ONE:
        element, pos = body[:1], 1
    elif body[:1] in _AROMATIC_ONE:
        element, pos, aromatic = _AROMATIC_ONE[body[:1]], 1, True
    else:
        raise UnsupportedFeatureError(f"unsupported element in [{body}]", offset)
    if pos < len(body) and body[pos].islower():
        raise UnsupportedFeatureError(f"unsupported element in [{body}]", offset)
    warned = False
    while pos < len(body) and body[pos] == "@":
        warned = True
        pos += 1
    hcount = 0
    if pos < len(body) and body[pos] == "H":
        pos += 1
        hcount = 1
        if pos < len(body) and body[pos].isdigit():
            hcount = int(body[pos])
            pos += 1
    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        pos += 1
        if pos < len(body) and body[pos].isdigit():
            charge = sign * int(body[pos])
            pos += 1
        else:
            charge = sign
            while pos < len(body) and body[pos] == ("+" if sign > 0 else "-"):
                charge += sign
                pos += 1
    if pos < len(body) and body[pos] == ":":
        raise UnsupportedFeatureError("atom classes are not supported", offset + pos)
    if pos != len(body):
        raise SmilesSyntaxError(f"cannot parse bracket atom [{body}]", offset + pos)
    return Atom(element, charge, 0, aromatic), hcount, warned


def _apply_bracket_hydrogens(mol: Molecule, bracket_h: dict[int, int], text: str) -> Molecule:
    atoms = list(mol.atoms)
    for idx, total in bracket_h.items():
        base = mol.implicit_hs(idx, 0)
        hs = max(0, total - base)
        atoms[idx] = Atom(atoms[idx].element, atoms[idx].charge, hs, atoms[idx].aromatic)
    out = Molecule(tuple(atoms), mol.bonds)
    for idx, total in bracket_h.items():
        if out.total_hs(idx) != total:
            raise UnsupportedFeatureError(
                f"hydrogen count {total} on atom {idx} implies a radical or unusual valence in {text!r}"
            )
    return out


def iter_smiles_file(path: str | Path) -> Iterator[str]:
    """Yield the SMILES field of each non-blank, non-comment line."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            yield parts[0]


# -- canonical ordering and writing ------------------------------------------


def _refine(m: Molecule, ranks: list[int]) -> list[int]:
    """Order-preserving iterative neighbourhood refinement of a partition."""
    n = len(ranks)
    nclass = len(set(ranks))
    while True:
        keys = [
            (ranks[i], tuple(sorted((ranks[j], int(o)) for j, o in m.neighbors[i])))
            for i in range(n)
        ]
        order = sorted(range(n), key=keys.__getitem__)
        new = [0] * n
        for pos, i in enumerate(order):
            if pos and keys[i] == keys[order[pos - 1]]:
                new[i] = new[order[pos - 1]]
            else:
                new[i] = pos
        k = len(set(new))
        ranks = new
        if k == nclass:
            return ranks
        nclass = k


def _invariants(m: Molecule, labels: Sequence | None) -> list[tuple]:
    return [
        (
            m.degree(i),
            ELEMENTS.index(a.element),
            a.aromatic,
            a.charge,
            m.total_hs(i),
            "" if labels is None else str(labels[i]),
        )
        for i, a in enumerate(m.atoms)
    ]


def _initial_ranks(inv: list[tuple]) -> list[int]:
    order = sorted(range(len(inv)), key=inv.__getitem__)
    ranks = [0] * len(inv)
    for pos, i in enumerate(order):
        ranks[i] = ranks[order[pos - 1]] if pos and inv[i] == inv[order[pos - 1]] else pos
    return ranks


def _leaf_rankings(m: Molecule, ranks: list[int]) -> Iterator[list[int]]:
    ranks = _refine(m, ranks)
    counts: dict[int, int] = {}
    for r in ranks:
        counts[r] = counts.get(r, 0) + 1
    tied = [r for r, c in counts.items() if c > 1]
    if not tied:
        yield ranks
        return
    r = min(tied)
    for a in (i for i, x in enumerate(ranks) if x == r):
        split = [x + 1 if (x == r and i != a) else x for i, x in enumerate(ranks)]
        yield from _leaf_rankings(m, split)


def canonical_ranks(m: Molecule, labels: Sequence | None = None) -> list[int]:
    """Canonical atom ranking (the one producing the canonical SMILES)."""
    return _canonical(m, labels)[1]


def canonical_key(m: Molecule, labels: Sequence | None = None) -> str:
    """Canonical string for ``m``; ``labels`` (one per atom) colour the atoms."""
    return _canonical(m, labels)[0]


def canonical_code(m: Molecule, labels: Sequence | None = None) -> tuple:
    """Hashable canonical form; equal codes mean (coloured) isomorphic graphs."""
    return _best_leaf(m, labels)[0]


def _best_leaf(m: Molecule, labels: Sequence | None) -> tuple[tuple, list[int]]:
    # every leaf ranking relabels the graph; keep the one encoding smallest
    inv = _invariants(m, labels)
    best = None
    best_ranks: list[int] = []
    for ranks in _leaf_rankings(m, _initial_ranks(inv)):
        by_rank = [None] * len(ranks)
        for i, r in enumerate(ranks):
            by_rank[r] = inv[i]
        edges = sorted(
            (min(ranks[i], ranks[j]), max(ranks[i], ranks[j]), int(o)) for i, j, o in m.bonds
        )
        code = (tuple(by_rank), tuple(edges))
        if best is None or code < best:
            best, best_ranks = code, ranks
    assert best is not None
    return best, best_ranks


def _canonical(m: Molecule, labels: Sequence | None) -> tuple[str, list[int]]:
    ranks = _best_leaf(m, labels)[1]
    return _write_ranked(m, ranks, labels), ranks


def write_smiles(m: Molecule) -> str:
    """Canonical SMILES: isomorphic molecules give identical strings."""
    return canonical_key(m)


def _atom_token(m: Molecule, i: int) -> str:
    a = m.atoms[i]
    sym = a.element.lower() if a.aromatic else a.element
    if a.hs == 0 and a.charge == 0:
        return sym
    h = m.total_hs(i)
    out = "[" + sym
    if h:
        out += "H" if h == 1 else f"H{h}"
    if a.charge:
        sign = "+" if a.charge > 0 else "-"
        out += sign if abs(a.charge) == 1 else f"{sign}{abs(a.charge)}"
    return out + "]"


def _bond_token(m: Molecule, i: int, j: int, order: BondOrder) -> str:
    both_arom = m.atoms[i].aromatic and m.atoms[j].aromatic
    if order is BondOrder.SINGLE:
        return "-" if both_arom else ""
    if order is BondOrder.AROMATIC:
        return "" if both_arom else ":"
    return "=" if order is BondOrder.DOUBLE else "#"


def _write_ranked(m: Molecule, ranks: Sequence[int], labels: Sequence | None) -> str:
    n = len(m.atoms)
    start = min(range(n), key=ranks.__getitem__)
    nbr_sorted = [sorted((j for j, _ in m.neighbors[i]), key=ranks.__getitem__) for i in range(n)]
    # spanning tree by rank-ordered DFS; remaining bonds become ring closures
    children: dict[int, list[int]] = {i: [] for i in range(n)}
    pos: dict[int, int] = {}
    tree = set()
    stack = [(start, iter(nbr_sorted[start]))]
    pos[start] = 0
    while stack:
        a, it = stack[-1]
        for b in it:
            if b not in pos:
                pos[b] = len(pos)
                children[a].append(b)
                tree.add((min(a, b), max(a, b)))
                stack.append((b, iter(nbr_sorted[b])))
                break
        else:
            stack.pop()
    closures: dict[int, list[int]] = {i: [] for i in range(n)}
    for i, j, _ in m.bonds:
        if (i, j) not in tree:
            closures[i].append(j)
            closures[j].append(i)

    out: list[str] = []
    open_digits: dict[tuple[int, int], int] = {}
    free: list[int] = []
    next_digit = 1

    def digit_str(d: int) -> str:
        return str(d) if d < 10 else f"%{d:02d}"

    def emit(a: int):
        nonlocal next_digit
        out.append(_atom_token(m, a))
        if labels is not None:
            out.append("{" + str(labels[a]) + "}")
        closing = sorted((b for b in closures[a] if (min(a, b), max(a, b)) in open_digits), key=lambda b: open_digits[(min(a, b), max(a, b))])
        opening = sorted((b for b in closures[a] if (min(a, b), max(a, b)) not in open_digits and pos[b] > pos[a]), key=ranks.__getitem__)
        for b in closing:
            d = open_digits.pop((min(a, b), max(a, b)))
            out.append(digit_str(d))
            free.append(d)
            free.sort()
        for b in opening:
            if free:
                d = free.pop(0)
            else:
                d = next_digit
                next_digit += 1
            open_digits[(min(a, b), max(a, b))] = d
            out.append(_bond_token(m, a, b, m.bond(a, b)) + digit_str(d))
        kids = children[a]
        for k, b in enumerate(kids):
            tok = _bond_token(m, a, b, m.bond(a, b))
            if k < len(kids) - 1:
                out.append("(" + tok)
                emit(b)
                out.append(")")
            else:
                out.append(tok)
                emit(b)

    emit(start)
    return "".join(out)


def canonical_smiles(text: str) -> str:
    return write_smiles(parse_smiles(text))


# -- fingerprints --------------------------------------------------------------


@dataclass(frozen=True)
class Fingerprint:
    bits: int
    nbits: int
    radius: int

    def on_bits(self) -> list[int]:
        return [i for i in range(self.nbits) if self.bits >> i & 1]

    def popcount(self) -> int:
        return self.bits.bit_count()


def _hash(*values: int) -> int:
    data = struct.pack(f"<{len(values)}q", *values)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little") >> 1


def morgan_fingerprint(m: Molecule, radius: int = 2, nbits: int = 2048) -> Fingerprint:
    """ECFP-style circular fingerprint folded to ``nbits`` bits."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if nbits <= 0 or nbits & (nbits - 1):
        raise ValueError("nbits must be a power of two")
    ring = m.ring_atoms
    ids = [
        _hash(
            ELEMENTS.index(a.element),
            m.degree(i),
            m.total_hs(i),
            a.charge,
            int(a.aromatic),
            int(i in ring),
        )
        for i, a in enumerate(m.atoms)
    ]
    bits = 0
    for x in ids:
        bits |= 1 << (x % nbits)
    for r in range(1, radius + 1):
        new = []
        for i in range(len(ids)):
            env = sorted((int(o), ids[j]) for j, o in m.neighbors[i])
            flat = [r, ids[i]] + [v for pair in env for v in pair]
            new.append(_hash(*flat))
        ids = new
        for x in ids:
            bits |= 1 << (x % nbits)
    return Fingerprint(bits, nbits, radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.nbits != b.nbits or a.radius != b.radius:
        raise ValueError("fingerprints were computed with different parameters")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union


def similarity(x: Molecule, y: Molecule, radius: int = 2, nbits: int = 2048) -> float:
    return tanimoto(morgan_fingerprint(x, radius, nbits), morgan_fingerprint(y, radius, nbits))
