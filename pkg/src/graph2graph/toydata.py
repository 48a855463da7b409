"""Deterministic generator of small molecule families for desk-scale experiments."""

from __future__ import annotations

import random

from .molgraph import BondOrder, Molecule, check_valence, parse_smiles, write_smiles

RING_GROUPS = (
    "c1ccccc1",
    "c1ccncc1",
    "c1ccsc1",
    "c1ccoc1",
    "C1CCCCC1",
    "C1CCCC1",
    "C1CC1",
    "C1CCNCC1",
    "C1CCOCC1",
)
CHAIN_GROUPS = ("C", "CC", "O", "N", "F", "Cl", "C(=O)O", "C#N", "OC", "C(C)C", "C=O", "NC(=O)C")
CORES = (
    "c1ccccc1",
    "c1ccncc1",
    "C1CCNCC1",
    "CC(=O)N",
    "CCOC(=O)C",
    "c1ccc2ccccc2c1",
    "CCCC",
    "CC(C)N",
    "OCCN",
    "c1ccsc1",
    "C1CCCCC1",
)


def attach(mol: Molecule, site: int, group: Molecule, anchor: int = 0) -> Molecule:
    """Join ``group`` to ``mol`` with a single bond between ``site`` and ``anchor``."""
    off = len(mol.atoms)
    bonds = list(mol.bonds) + [(i + off, j + off, o) for i, j, o in group.bonds]
    bonds.append((site, anchor + off, BondOrder.SINGLE))
    return Molecule(mol.atoms + group.atoms, tuple(bonds))


def free_sites(mol: Molecule) -> list[int]:
    return [i for i in range(len(mol.atoms)) if mol.atoms[i].hs == 0 and mol.implicit_hs(i) > 0]


def _grow(rng: random.Random, mol: Molecule, ring_prob: float) -> Molecule | None:
    sites = free_sites(mol)
    if not sites:
        return None
    pool = RING_GROUPS if rng.random() < ring_prob else CHAIN_GROUPS
    group = parse_smiles(rng.choice(pool))
    anchors = free_sites(group)
    if not anchors:
        return None
    out = attach(mol, rng.choice(sites), group, rng.choice(anchors))
    if check_valence(out):
        return None
    return parse_smiles(write_smiles(out))


def ring_count(m: Molecule) -> int:
    """Cyclomatic number (independent rings) of a connected molecule."""
    return len(m.bonds) - len(m.atoms) + 1


def generate_families(
    n_families: int,
    variants: int = 4,
    seed: int = 0,
    min_atoms: int = 6,
    max_atoms: int = 18,
) -> list[str]:
    """Canonical SMILES for ``n_families`` scaffolds plus one-edit variants of each.

    Each family has a base molecule and up to ``variants`` children obtained by
    attaching one more group (a ring with probability one half).
    """
    rng = random.Random(seed)
    seen: set[str] = set()
    out: list[str] = []

    def keep(m: Molecule) -> bool:
        if not (min_atoms <= len(m.atoms) <= max_atoms):
            return False
        s = write_smiles(m)
        if s in seen:
            return False
        seen.add(s)
        out.append(s)
        return True

    tries = 0
    families = 0
    while families < n_families and tries < n_families * 50:
        tries += 1
        base = parse_smiles(rng.choice(CORES))
        for _ in range(rng.randint(1, 3)):
            grown = _grow(rng, base, ring_prob=0.3)
            if grown is not None and len(grown.atoms) <= max_atoms - 3:
                base = grown
        if not keep(base):
            continue
        families += 1
        for _ in range(variants):
            child = _grow(rng, base, ring_prob=0.5)
            if child is not None:
                keep(child)
    return out
