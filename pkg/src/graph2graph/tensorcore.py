"""Numeric core on top of torch autograd: init, tree GRU, bilinear attention, Adam store, checkpoints.

All learnable tensors live in ``torch.nn.Module`` trees so parameter paths such
as ``encoder.graph.W1`` fall out of attribute names.
"""

from __future__ import annotations

import contextlib
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

MAGIC = b"VJTNN1"


class NumericError(FloatingPointError):
    """Raised when a loss or gradient turns non-finite."""


_debug = False


def set_debug(flag: bool) -> None:
    global _debug
    _debug = bool(flag)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if _debug and not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


@contextlib.contextmanager
def float64_mode():
    """Build and run modules in 64-bit inside the block (used by gradient checks)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def glorot(rows: int, cols: int) -> nn.Parameter:
    bound = math.sqrt(6.0 / (rows + cols))
    return nn.Parameter(torch.empty(rows, cols).uniform_(-bound, bound))


def zeros(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape))


class Dense(nn.Module):
    """``y = x W^T (+ b)`` with Glorot weights and zero bias."""

    def __init__(self, n_in: int, n_out: int, bias: bool = False):
        super().__init__()
        self.W = glorot(n_out, n_in)
        self.b = zeros(n_out) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x @ self.W.T
        return y + self.b if self.b is not None else y


class TreeGRU(nn.Module):
    """Message update over an unordered set of inbound messages.

    ``f``: [N, F] node inputs; ``h_nei``: [N, K, H] inbound messages padded
    with zero rows. Zero padding is exact: it adds nothing to ``s`` nor to the
    gated sum, so the result depends only on the set of real messages.
    """

    def __init__(self, n_in: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.Wz = glorot(hidden, n_in)
        self.Uz = glorot(hidden, hidden)
        self.bz = zeros(hidden)
        self.Wr = glorot(hidden, n_in)
        self.Ur = glorot(hidden, hidden)
        self.br = zeros(hidden)
        self.W = glorot(hidden, n_in)
        self.U = glorot(hidden, hidden)
        self.b = zeros(hidden)

    def forward(self, f: torch.Tensor, h_nei: torch.Tensor) -> torch.Tensor:
        if h_nei.shape[-1] != self.hidden:
            raise ValueError(f"message width {h_nei.shape[-1]} != hidden {self.hidden}")
        s = h_nei.sum(dim=1)
        z = torch.sigmoid(f @ self.Wz.T + s @ self.Uz.T + self.bz)
        r = torch.sigmoid((f @ self.Wr.T + self.br).unsqueeze(1) + h_nei @ self.Ur.T)
        gated = (r * h_nei).sum(dim=1)
        h_tilde = torch.tanh(f @ self.W.T + gated @ self.U.T + self.b)
        return (1.0 - z) * s + z * h_tilde


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1)


class Attention(nn.Module):
    """Bilinear attention over tree and graph source vectors with separate A_T, A_G."""

    def __init__(self, query: int, hidden: int):
        super().__init__()
        self.A_T = glorot(query, hidden)
        self.A_G = glorot(query, hidden)

    def forward(self, h, xt, xg, mt=None, mg=None):
        """``h``: [B, Q]; ``xt``: [B, Nt, H]; ``xg``: [B, Ng, H]; masks are boolean [B, N].

        Returns ``(context [B, 2H], alpha_T, alpha_G)``.
        """
        if xt.shape[1] == 0 or xg.shape[1] == 0:
            raise ValueError("attention over an empty source set")
        st = torch.bmm(xt, (h @ self.A_T).unsqueeze(-1)).squeeze(-1)
        sg = torch.bmm(xg, (h @ self.A_G).unsqueeze(-1)).squeeze(-1)
        at = masked_softmax(st, mt)
        ag = masked_softmax(sg, mg)
        ctx = torch.cat([torch.bmm(at.unsqueeze(1), xt).squeeze(1), torch.bmm(ag.unsqueeze(1), xg).squeeze(1)], dim=-1)
        return ctx, at, ag


# -- optimizer state and checkpoints ------------------------------------------


@dataclass
class Schedule:
    lr: float = 1e-3
    decay: float = 0.9

    def at(self, epoch: int) -> float:
        return self.lr * self.decay**epoch


class ParamStore:
    """Parameters of a module plus Adam moments and an epoch counter."""

    def __init__(self, module: nn.Module, lr: float = 1e-3, decay: float = 0.9, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.schedule = Schedule(lr, decay)
        self.epoch = 0
        self.opt = torch.optim.Adam(module.parameters(), lr=lr, betas=betas, eps=eps)

    def named(self) -> dict[str, torch.Tensor]:
        return dict(self.module.named_parameters())

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=False)

    def step(self) -> None:
        self.opt.step()

    def end_epoch(self) -> None:
        self.epoch += 1
        for g in self.opt.param_groups:
            g["lr"] = self.schedule.at(self.epoch)

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    # checkpoint layout: magic, epoch u32, lr f64, n u32, then per entry
    # (name_len u16, name, ndim u8, dims u32 x ndim, offset u64), then f32 data.

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for name, p in self.module.named_parameters():
            out[name] = p.detach()
            st = self.opt.state.get(p, {})
            if st:
                out[name + "@m"] = st["exp_avg"]
                out[name + "@v"] = st["exp_avg_sq"]
                out[name + "@step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(1)
        return out

    def to_bytes(self) -> bytes:
        tensors = self.state_tensors()
        head = io.BytesIO()
        head.write(MAGIC)
        head.write(struct.pack("<IdI", self.epoch, self.lr, len(tensors)))
        offset = 0
        blobs = []
        for name, t in tensors.items():
            raw = name.encode("utf-8")
            head.write(struct.pack("<H", len(raw)))
            head.write(raw)
            head.write(struct.pack("<B", t.dim()))
            head.write(struct.pack(f"<{t.dim()}I", *t.shape))
            head.write(struct.pack("<Q", offset))
            data = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
            blobs.append(data)
            offset += len(data)
        return head.getvalue() + b"".join(blobs)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    def load(self, path: str | Path) -> None:
        tensors, epoch, lr = read_checkpoint(path)
        params = dict(self.module.named_parameters())
        missing = set(params) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, p in params.items():
                t = tensors[name]
                if tuple(t.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(p.shape)}")
                p.copy_(t)
                if name + "@m" in tensors:
                    self.opt.state[p] = {
                        "step": torch.tensor(float(tensors[name + "@step"].item())),
                        "exp_avg": tensors[name + "@m"].to(p.dtype).clone(),
                        "exp_avg_sq": tensors[name + "@v"].to(p.dtype).clone(),
                    }
        self.epoch = epoch
        for g in self.opt.param_groups:
            g["lr"] = lr


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], int, float]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not a VJTNN1 checkpoint")
    pos = len(MAGIC)
    epoch, lr, n = struct.unpack_from("<IdI", buf, pos)
    pos += struct.calcsize("<IdI")
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        table.append((name, shape, off))
    out = {}
    for name, shape, off in table:
        count = math.prod(shape)
        start = pos + off
        arr = torch.frombuffer(bytearray(buf[start : start + 4 * count]), dtype=torch.float32)
        out[name] = arr.reshape(shape).to(torch.get_default_dtype())
    return out, epoch, lr
