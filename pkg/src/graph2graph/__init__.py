"""Junction-tree graph-to-graph translation of molecules."""

from .config import RunConfig
from .junctree import ClusterVocab, JunctionTree, build_vocab, decompose
from .molgraph import Molecule, check_valence, morgan_fingerprint, parse_smiles, tanimoto, write_smiles

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "ClusterVocab",
    "JunctionTree",
    "Molecule",
    "build_vocab",
    "check_valence",
    "decompose",
    "morgan_fingerprint",
    "parse_smiles",
    "tanimoto",
    "write_smiles",
]
