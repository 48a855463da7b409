import math

import torch

from graph2graph.encoder import Encoder, collate_graphs
from graph2graph.graphdec import GraphDecoder, ScoringStep, assemble_greedy, assembly_loss, candidate_alpha, candidate_spec
from graph2graph.junctree import build_vocab, decompose, ground_truth_steps
from graph2graph.molgraph import check_valence, parse_smiles
from graph2graph.tensorcore import float64_mode
from graph2graph.treedec import Plan, stand_in_tree


def xylene():
    m = parse_smiles("Cc1ccccc1C")
    v = build_vocab([m])
    t = decompose(m).with_labels(v)
    return m, v, t


def setup(seed=0, H=6):
    m, v, t = xylene()
    torch.manual_seed(seed)
    enc = Encoder(len(v), H)
    e = enc.encode([t], [m])
    return m, v, t, enc, e, GraphDecoder(H)


def test_alpha_prefers_node_then_parent():
    _, v, t = xylene()
    step = ground_truth_steps(t, v)[1]  # second methyl onto the ring
    for cand in step.candidates:
        alpha = candidate_alpha(cand)
        owners = cand.assembly.owners
        for a, o in enumerate(owners):
            if cand.node in o:
                assert alpha[a] == cand.node
            elif cand.parent in o:
                assert alpha[a] == cand.parent
            else:
                assert alpha[a] == min(o)
        assert set(alpha) == {0, 1, 2}


def test_score_is_pooled_dot_product():
    with float64_mode():
        m, v, t, enc, e, dec = setup()
        step = ground_truth_steps(t, v)[1]
        specs = [candidate_spec(c) for c in step.candidates]
        gsum = e.graph_sum()
        together = dec.score(specs, [0] * 3, e.tree_msgs, e.tree_edge_rows, gsum)
        for k, s in enumerate(specs):
            alone = dec.score([s], [0], e.tree_msgs, e.tree_edge_rows, gsum)
            assert torch.allclose(together[k], alone[0], atol=1e-12)
        b = collate_graphs([specs[0]], [e.tree_edge_rows[0]])
        atoms = dec.mpn(b, e.tree_msgs)
        assert torch.allclose(together[0], atoms.sum(0) @ gsum[0], atol=1e-12)


def test_tree_messages_reach_candidate_scores():
    with float64_mode():
        m, v, t, enc, e, dec = setup()
        specs = [candidate_spec(c) for c in ground_truth_steps(t, v)[1].candidates]
        gsum = e.graph_sum()
        a = dec.score(specs, [0] * 3, e.tree_msgs, e.tree_edge_rows, gsum)
        b = dec.score(specs, [0] * 3, torch.zeros_like(e.tree_msgs), e.tree_edge_rows, gsum)
        assert not torch.allclose(a, b)


def test_substitution_patterns_separable_by_graph_alone():
    # with zero tree messages the three candidates differ only in graph shape
    with float64_mode():
        m, v, t, enc, e, dec = setup()
        specs = [candidate_spec(c) for c in ground_truth_steps(t, v)[1].candidates]
        s = dec.score(specs, [0] * 3, torch.zeros_like(e.tree_msgs), e.tree_edge_rows, e.graph_sum())
        assert len(set(round(x, 9) for x in s.tolist())) == 3


def test_assembly_loss_brute_force(corpus_mols, corpus_vocab):
    with float64_mode():
        mols = corpus_mols[:4]
        trees = [decompose(x).with_labels(corpus_vocab) for x in mols]
        torch.manual_seed(1)
        enc = Encoder(len(corpus_vocab), 5)
        dec = GraphDecoder(5)
        e = enc.encode(trees, mols)
        gsum = e.graph_sum()
        steps = [[ScoringStep([candidate_spec(c) for c in s.candidates], s.truth) for s in ground_truth_steps(t, corpus_vocab)] for t in trees]
        out = assembly_loss(dec, steps, e.tree_msgs, e.tree_edge_rows, gsum)
        expect, n = 0.0, 0
        for b, item_steps in enumerate(steps):
            for st in item_steps:
                if len(st.specs) < 2:
                    continue
                s = [dec.score([sp], [b], e.tree_msgs, e.tree_edge_rows, gsum).item() for sp in st.specs]
                expect += math.log(sum(math.exp(x) for x in s)) - s[st.truth]
                n += 1
        assert out["assm_n"] == n
        assert abs(out["assm"].item() - expect) < 1e-9


def test_assembly_loss_empty_is_zero():
    g = torch.randn(1, 4, requires_grad=True)
    out = assembly_loss(GraphDecoder(4), [[]], torch.zeros(1, 4), [{}], g)
    assert out["assm"].item() == 0.0 and out["assm_n"] == 0


def test_greedy_assembly_is_valid_or_none(corpus_mols, corpus_vocab):
    torch.manual_seed(2)
    enc = Encoder(len(corpus_vocab), 8)
    dec = GraphDecoder(8)
    built = 0
    for m in corpus_mols[:40]:
        t = decompose(m).with_labels(corpus_vocab)
        plan = Plan.from_tree(t)
        tree = stand_in_tree(list(plan.labels), list(plan.parents), corpus_vocab)
        with torch.no_grad():
            e = enc.encode([tree], [m])
            out = assemble_greedy(dec, tree, corpus_vocab, e.tree_msgs, e.tree_edge_rows[0], e.graph_sum()[0])
        if out is not None:
            built += 1
            assert check_valence(out) == [] and out.is_connected()
            assert sorted(a.element for a in out.atoms) == sorted(a.element for a in m.atoms)
    assert built >= 30


def test_greedy_assembly_dead_end_returns_none():
    v = build_vocab([parse_smiles("C=O"), parse_smiles("CC(C)(C)C")])
    # carbonyl oxygen cannot take two more double-bonded neighbours
    lab = v["C=O"]
    tree = stand_in_tree([lab, lab, lab, lab], [-1, 0, 0, 0], v)
    torch.manual_seed(0)
    enc = Encoder(len(v), 4)
    e = enc.encode([tree], [parse_smiles("C=O")])
    assert assemble_greedy(GraphDecoder(4), tree, v, e.tree_msgs, e.tree_edge_rows[0], e.graph_sum()[0]) is None
