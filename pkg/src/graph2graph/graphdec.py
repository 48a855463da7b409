"""Candidate-attachment scoring and greedy graph assembly."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import GraphMPN, GraphSpec, collate_graphs
from .junctree import AssemblyError, AttachmentCandidate, ClusterVocab, JunctionTree, assemble_with
from .molgraph import Molecule, check_valence


def candidate_alpha(cand: AttachmentCandidate) -> list[int]:
    """Tree node index per atom: the attaching node, then its parent, then the lowest owner."""
    out = []
    for owners in cand.assembly.owners:
        if cand.node in owners:
            out.append(cand.node)
        elif cand.parent in owners:
            out.append(cand.parent)
        else:
            out.append(min(owners))
    return out


def candidate_spec(cand: AttachmentCandidate) -> GraphSpec:
    return GraphSpec.from_molecule(cand.graph, candidate_alpha(cand))


@dataclass
class CandidateScore:
    candidate: AttachmentCandidate
    score: float


@dataclass
class ScoringStep:
    """Candidates at one multi-choice tree node plus the ground-truth index."""

    specs: list[GraphSpec]
    truth: int


class GraphDecoder(nn.Module):
    def __init__(self, hidden: int, depth: int = 3):
        super().__init__()
        self.mpn = GraphMPN(hidden, depth)

    def score(
        self,
        specs: list[GraphSpec],
        item: list[int],
        tree_msgs: torch.Tensor,
        edge_rows: list[dict],
        graph_sum: torch.Tensor,
    ) -> torch.Tensor:
        """f(G) = m_G . sum_u x_u for every candidate spec; ``item[c]`` selects the source.

        Tree messages are looked up by ``edge_rows[item[c]]``; a missing
        (non-adjacent) pair injects nothing.
        """
        batch = collate_graphs(specs, [edge_rows[b] for b in item])
        atoms = self.mpn(batch, tree_msgs)
        pooled = torch.zeros(len(specs), atoms.shape[1], dtype=atoms.dtype).index_add(0, batch.owner, atoms)
        return (pooled * graph_sum[torch.tensor(item)]).sum(dim=-1)


def assembly_loss(
    decoder: GraphDecoder,
    steps: list[list[ScoringStep]],
    tree_msgs: torch.Tensor,
    edge_rows: list[dict],
    graph_sum: torch.Tensor,
) -> dict[str, torch.Tensor]:
    """Sum over multi-candidate nodes of ``-f(G*) + logsumexp f(G')``."""
    specs, item, group, truth = [], [], [], []
    g = 0
    for b, item_steps in enumerate(steps):
        for st in item_steps:
            if len(st.specs) < 2:
                continue
            truth.append(len(specs) + st.truth)
            specs.extend(st.specs)
            item.extend([b] * len(st.specs))
            group.extend([g] * len(st.specs))
            g += 1
    if not specs:
        zero = graph_sum.sum() * 0.0
        return {"assm": zero, "assm_acc": torch.tensor(1.0), "assm_n": 0}
    scores = decoder.score(specs, item, tree_msgs, edge_rows, graph_sum)
    grp = torch.tensor(group)
    # group-wise log-sum-exp with a per-group max for stability
    gmax = torch.full((g,), float("-inf"), dtype=scores.dtype).scatter_reduce(0, grp, scores.detach(), "amax")
    lse = torch.zeros(g, dtype=scores.dtype).index_add(0, grp, torch.exp(scores - gmax[grp])).log() + gmax
    tr = torch.tensor(truth)
    loss = (lse - scores[tr]).sum()
    with torch.no_grad():
        best = torch.full((g,), float("-inf"), dtype=scores.dtype).scatter_reduce(0, grp, scores, "amax")
        acc = (scores[tr] >= best).to(scores.dtype).mean()
    return {"assm": loss, "assm_acc": acc, "assm_n": g}


def assemble_greedy(
    decoder: GraphDecoder,
    tree: JunctionTree,
    vocab: ClusterVocab,
    tree_msgs: torch.Tensor,
    edge_rows: dict,
    graph_sum: torch.Tensor,
) -> Molecule | None:
    """Assemble a decoded tree in decode order, picking the best-scoring candidate each time.

    ``tree`` must be numbered in decode order (node 0 the root, parents first).
    Returns ``None`` when some node has no valid attachment.
    """
    n = len(tree.nodes)
    parents = [-1] * n
    for a, b in tree.edges:
        parents[max(a, b)] = min(a, b)

    def choose(node, cands):
        if len(cands) == 1:
            return 0
        with torch.no_grad():
            s = decoder.score([candidate_spec(c) for c in cands], [0] * len(cands), tree_msgs, [edge_rows], graph_sum.unsqueeze(0))
        return int(torch.argmax(s))  # first maximum = lowest canonical form

    try:
        asm = assemble_with(tree, vocab, choose, order=list(range(n)), parents=parents)
    except AssemblyError:
        return None
    mol = asm.mol.normalized()
    if not mol.is_connected() or check_valence(mol):
        return None
    return mol
