"""Attention tree decoder: teacher-forced losses, greedy decoding and soft unrolls.

All three modes run through one step-synchronous engine over a batch of trees.
Decoded node ids follow creation order, so node ``k`` is the ``k``-th node in
preorder and every node's parent has a smaller id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from .junctree import Cluster, ClusterVocab, JunctionTree
from .tensorcore import Attention, Dense, TreeGRU

MAX_NODES = 60


class Mode(Enum):
    TEACHER = "teacher"
    GREEDY = "greedy"
    SOFT = "soft"


@dataclass(frozen=True)
class Plan:
    """A target tree renumbered into decode order."""

    labels: tuple[int, ...]
    parents: tuple[int, ...]
    children: tuple[tuple[int, ...], ...]
    order: tuple[int, ...]  # decode id -> original tree node

    @classmethod
    def from_tree(cls, tree: JunctionTree) -> Plan:
        order, parent = tree.dfs()
        pos = {node: k for k, node in enumerate(order)}
        labels = tuple(tree.nodes[n].label for n in order)
        parents = tuple(-1 if parent[n] < 0 else pos[parent[n]] for n in order)
        children: list[list[int]] = [[] for _ in order]
        for k, p in enumerate(parents):
            if p >= 0:
                children[p].append(k)
        return cls(labels, parents, tuple(tuple(c) for c in children), tuple(order))

    def topology_targets(self) -> list[int]:
        """Expand (1) / backtrack (0) sequence of the depth-first unroll, final stop included."""
        out: list[int] = []

        def visit(i: int):
            for c in self.children[i]:
                out.append(1)
                visit(c)
            out.append(0)

        visit(0)
        return out


def stand_in_tree(labels, parents, vocab: ClusterVocab | None = None) -> JunctionTree:
    """A label-only tree (no atoms) for decoded topologies."""
    nodes = [Cluster((), (), lab) for lab in labels]
    edges = [(p, k) for k, p in enumerate(parents) if p >= 0]
    smiles = [vocab.entries[lab] for lab in labels] if vocab is not None else []
    return JunctionTree(nodes, edges, 0, None, smiles)


def straight_through(p: torch.Tensor) -> torch.Tensor:
    """Forward ``1[p > 0.5]``; backward a hard sigmoid with unit slope on [0, 1]."""
    hard = (p > 0.5).to(p.dtype)
    soft = p.clamp(0.0, 1.0)
    return hard + (soft - soft.detach())


@dataclass
class StepRecord:
    node: int
    target: int  # node the produced message points to (-1 for the final stop)
    expand: bool
    h_state: torch.Tensor
    p: torch.Tensor
    message: torch.Tensor | None
    q: torch.Tensor | None = None
    d: torch.Tensor | None = None


@dataclass
class DecoderTrace:
    q_root: torch.Tensor
    steps: list[StepRecord] = field(default_factory=list)
    truncated: bool = False


@dataclass
class _Tree:
    feats: list
    labels: list[int]
    parents: list[int]
    n_children: list[int]
    into: list[list[tuple[int, int]]]  # per node: (sender, buffer row)
    cur: int = 0
    done: bool = False
    truncated: bool = False
    plan: Plan | None = None
    trace: DecoderTrace | None = None


@dataclass
class Unroll:
    """Outcome of a batched unroll."""

    trees: list[_Tree]
    buffer: torch.Tensor
    q_root_logits: torch.Tensor
    q_root: list[torch.Tensor]
    topo_logits: list[torch.Tensor] = field(default_factory=list)
    topo_targets: list[torch.Tensor] = field(default_factory=list)
    topo_owner: list[torch.Tensor] = field(default_factory=list)
    label_logits: list[torch.Tensor] = field(default_factory=list)
    label_targets: list[torch.Tensor] = field(default_factory=list)
    label_owner: list[torch.Tensor] = field(default_factory=list)

    def root_inbound(self, b: int) -> torch.Tensor:
        rows = [r for _, r in self.trees[b].into[0]]
        if not rows:
            return self.buffer.new_zeros(self.buffer.shape[1])
        return self.buffer[torch.tensor(rows)].sum(dim=0)

    def message(self, b: int, a: int, c: int) -> torch.Tensor:
        for k, r in self.trees[b].into[c]:
            if k == a:
                return self.buffer[r]
        raise KeyError((a, c))

    def messages(self, b: int) -> dict[tuple[int, int], torch.Tensor]:
        return {(k, c): self.buffer[r] for c, lst in enumerate(self.trees[b].into) for k, r in lst}

    def tree_repr(self, b: int) -> torch.Tensor:
        return torch.cat([self.q_root[b], self.root_inbound(b)])


class TreeDecoder(nn.Module):
    def __init__(self, vocab_size: int, hidden: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.gru = TreeGRU(vocab_size, hidden)
        self.W1 = Dense(vocab_size, hidden)
        self.W2 = Dense(hidden, hidden)
        self.att_topo = Attention(hidden, hidden)
        self.W3 = Dense(hidden, hidden)
        self.W4 = Dense(2 * hidden, hidden)
        self.u = Dense(hidden, 1)
        self.att_label = Attention(hidden, hidden)
        self.Wl1 = Dense(hidden, hidden)
        self.Wl2 = Dense(2 * hidden, hidden)
        self.Ul = Dense(hidden, vocab_size)

    # -- per-step predictors -------------------------------------------------

    def state(self, f: torch.Tensor, inbound_sum: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.W1(f) + self.W2(inbound_sum))

    def topology_logit(self, h_t, xt, xg, mt=None, mg=None) -> torch.Tensor:
        ctx, _, _ = self.att_topo(h_t, xt, xg, mt, mg)
        return self.u(torch.relu(self.W3(h_t) + self.W4(ctx))).squeeze(-1)

    def predict_topology(self, h_t, xt, xg, mt=None, mg=None) -> torch.Tensor:
        return torch.sigmoid(self.topology_logit(h_t, xt, xg, mt, mg))

    def label_logits(self, h_msg, xt, xg, mt=None, mg=None) -> torch.Tensor:
        ctx, _, _ = self.att_label(h_msg, xt, xg, mt, mg)
        return self.Ul(torch.relu(self.Wl1(h_msg) + self.Wl2(ctx)))

    def predict_label(self, h_msg, xt, xg, mt=None, mg=None) -> torch.Tensor:
        return torch.softmax(self.label_logits(h_msg, xt, xg, mt, mg), dim=-1)

    # -- engine --------------------------------------------------------------

    def unroll(
        self,
        source: tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor],
        mode: Mode,
        plans: list[Plan] | None = None,
        max_nodes: int = MAX_NODES,
        allowed: torch.Tensor | None = None,
        record: bool = False,
    ) -> Unroll:
        """Unroll over a batch. ``source`` is padded ``(xt, mt, xg, mg)`` with boolean masks.

        TEACHER follows ``plans``; GREEDY takes argmax labels (restricted by the
        optional ``allowed[parent_label, child_label]`` table) and expands when
        p > 0.5; SOFT feeds label distributions and gates messages by the
        straight-through decision. SOFT with ``plans`` follows the plan's
        labels (as one-hot rows) and topology while keeping the gating.
        """
        xt, mt, xg, mg = source
        B = xt.shape[0]
        H = self.hidden
        V = self.vocab_size
        dtype = xt.dtype
        eye = torch.eye(V, dtype=dtype)
        guided = plans is not None
        if mode is Mode.TEACHER and not guided:
            raise ValueError("teacher forcing needs target plans")

        zero_q = xt.new_zeros(B, H)
        root_logits = self.label_logits(zero_q, xt, xg, mt, mg)
        root_q = torch.softmax(root_logits, dim=-1)
        trees: list[_Tree] = []
        q_root = []
        for b in range(B):
            if guided:
                lab = plans[b].labels[0]
                feat = eye[lab]
            elif mode is Mode.SOFT:
                lab = int(root_q[b].argmax())
                feat = root_q[b]
            else:
                lab = int(root_q[b].argmax())
                feat = eye[lab]
            q_root.append(feat)
            t = _Tree([feat], [lab], [-1], [0], [[]], plan=plans[b] if guided else None)
            if record:
                t.trace = DecoderTrace(q_root=root_q[b])
            trees.append(t)

        out = Unroll(trees, xt.new_zeros(1, H), root_logits, q_root)
        if guided:
            out.label_logits.append(root_logits)
            out.label_targets.append(torch.tensor([p.labels[0] for p in plans]))
            out.label_owner.append(torch.arange(B))
        buffer = out.buffer

        while True:
            active = [b for b in range(B) if not trees[b].done]
            if not active:
                break
            act = torch.tensor(active)
            f = torch.stack([trees[b].feats[trees[b].cur] for b in active])
            in_rows = [[r for _, r in trees[b].into[trees[b].cur]] for b in active]
            width = max([len(r) for r in in_rows] + [1])
            idx = torch.zeros(len(active), width, dtype=torch.int64)
            for k, rows in enumerate(in_rows):
                idx[k, : len(rows)] = torch.tensor(rows, dtype=torch.int64)
            nei = buffer[idx]
            sxt, smt, sxg, smg = xt[act], mt[act], xg[act], mg[act]
            h_t = self.state(f, nei.sum(dim=1))
            logit = self.topology_logit(h_t, sxt, sxg, smt, smg)
            p = torch.sigmoid(logit)

            expand = []
            for k, b in enumerate(active):
                t = trees[b]
                if guided:
                    e = t.n_children[t.cur] < len(t.plan.children[t.cur])
                else:
                    e = bool(p[k] > 0.5)
                    if e and len(t.labels) >= max_nodes:
                        e = False
                        t.truncated = True
                expand.append(e)
            if guided:
                out.topo_logits.append(logit)
                out.topo_targets.append(torch.tensor(expand, dtype=dtype))
                out.topo_owner.append(act)

            # messages: along the new edge when expanding, towards the parent when backtracking
            senders, msg_idx, targets = [], [], []
            for k, b in enumerate(active):
                t = trees[b]
                if expand[k]:
                    senders.append(k)
                    msg_idx.append(in_rows[k])
                    targets.append(len(t.labels))
                elif t.parents[t.cur] >= 0:
                    par = t.parents[t.cur]
                    senders.append(k)
                    msg_idx.append([r for s, r in t.into[t.cur] if s != par])
                    targets.append(par)
            msgs = None
            d = None
            if senders:
                sk = torch.tensor(senders)
                width = max([len(r) for r in msg_idx] + [1])
                idx2 = torch.zeros(len(senders), width, dtype=torch.int64)
                for k, rows in enumerate(msg_idx):
                    idx2[k, : len(rows)] = torch.tensor(rows, dtype=torch.int64)
                msgs = self.gru(f[sk], buffer[idx2])
                if mode is Mode.SOFT:
                    d = straight_through(p[sk])
                    if guided:
                        forced = torch.tensor([float(expand[k]) for k in senders], dtype=dtype)
                        d = forced + (d - d.detach())
                    ex = torch.tensor([expand[k] for k in senders])
                    gate = torch.where(ex, d, 1.0 - d)
                    msgs = msgs * gate.unsqueeze(-1)
                base_row = buffer.shape[0]
                buffer = torch.cat([buffer, msgs], dim=0)

            # labels of newly created children
            new_children = [j for j, k in enumerate(senders) if expand[k]]
            q = None
            if new_children:
                nc = torch.tensor(new_children)
                ks = torch.tensor([senders[j] for j in new_children])
                logits_l = self.label_logits(msgs[nc], sxt[ks], sxg[ks], smt[ks], smg[ks])
                if guided:
                    tl = []
                    for j in new_children:
                        t = trees[active[senders[j]]]
                        tl.append(t.plan.labels[t.plan.children[t.cur][t.n_children[t.cur]]])
                    out.label_logits.append(logits_l)
                    out.label_targets.append(torch.tensor(tl))
                    out.label_owner.append(act[ks])
                elif allowed is not None:
                    par_labels = torch.tensor([trees[active[senders[j]]].labels[trees[active[senders[j]]].cur] for j in new_children])
                    logits_l = logits_l.masked_fill(~allowed[par_labels], float("-inf"))
                q = torch.softmax(logits_l, dim=-1)

            # bookkeeping
            sender_pos = {k: j for j, k in enumerate(senders)}
            child_pos = {senders[j]: n for n, j in enumerate(new_children)}
            for k, b in enumerate(active):
                t = trees[b]
                here = t.cur
                row = base_row + sender_pos[k] if k in sender_pos else None
                rec_q = None
                if expand[k]:
                    n = child_pos[k]
                    if guided:
                        lab = t.plan.labels[t.plan.children[t.cur][t.n_children[t.cur]]]
                        feat = eye[lab]
                    elif mode is Mode.SOFT:
                        lab = int(q[n].argmax())
                        feat = q[n]
                    else:
                        lab = int(q[n].argmax())
                        feat = eye[lab]
                    rec_q = q[n]
                    j = len(t.labels)
                    t.labels.append(lab)
                    t.feats.append(feat)
                    t.parents.append(t.cur)
                    t.n_children.append(0)
                    t.into.append([(t.cur, row)])
                    t.n_children[t.cur] += 1
                    target, t.cur = j, j
                elif t.parents[t.cur] >= 0:
                    par = t.parents[t.cur]
                    t.into[par].append((t.cur, row))
                    target, t.cur = par, par
                else:
                    target = -1
                    t.done = True
                if t.trace is not None:
                    t.trace.truncated = t.truncated
                    t.trace.steps.append(
                        StepRecord(
                            node=here,
                            target=target,
                            expand=expand[k],
                            h_state=h_t[k],
                            p=p[k],
                            message=buffer[row] if row is not None else None,
                            q=rec_q,
                            d=d[sender_pos[k]] if d is not None and k in sender_pos else None,
                        )
                    )
        out.buffer = buffer
        return out

    def teacher_loss(self, source, plans: list[Plan]) -> dict[str, torch.Tensor]:
        """Summed topology BCE and label CE over a batch of target plans."""
        run = self.unroll(source, Mode.TEACHER, plans)
        return teacher_terms(run, len(plans))


def teacher_terms(run: Unroll, batch: int) -> dict[str, torch.Tensor]:
    tl = torch.cat(run.topo_logits)
    tt = torch.cat(run.topo_targets)
    to = torch.cat(run.topo_owner)
    ll = torch.cat(run.label_logits)
    lt = torch.cat(run.label_targets)
    lo = torch.cat(run.label_owner)
    topo = F.binary_cross_entropy_with_logits(tl, tt, reduction="sum")
    label = F.cross_entropy(ll, lt, reduction="sum")
    with torch.no_grad():
        topo_ok = ((tl > 0).to(tt.dtype) == tt)
        label_ok = ll.argmax(dim=-1) == lt
        exact = torch.ones(batch, dtype=torch.bool)
        exact.index_put_((to[~topo_ok],), torch.tensor(False))
        exact.index_put_((lo[~label_ok],), torch.tensor(False))
    return {
        "topo": topo,
        "label": label,
        "topo_acc": topo_ok.to(tt.dtype).mean(),
        "label_acc": label_ok.to(tt.dtype).mean(),
        "exact": exact,
    }


def decode_tree(
    decoder: TreeDecoder,
    source,
    vocab: ClusterVocab | None = None,
    target: JunctionTree | None = None,
    max_nodes: int = MAX_NODES,
    allowed: torch.Tensor | None = None,
) -> tuple[JunctionTree, DecoderTrace]:
    """Decode one tree (teacher-forced if ``target`` is given) and return it with its trace."""
    plans = [Plan.from_tree(target)] if target is not None else None
    mode = Mode.TEACHER if target is not None else Mode.GREEDY
    run = decoder.unroll(source, mode, plans, max_nodes=max_nodes, allowed=allowed, record=True)
    t = run.trees[0]
    return stand_in_tree(t.labels, t.parents, vocab), t.trace
