"""Convolutional Q-networks, dueling heads, GradCAM and checkpoints.

Two architectures are provided. ``small`` has two conv blocks and heads of
512 and 128 units; ``big`` has three conv blocks and heads of 2048, 48 and
32 units. A block is 3x3 same-padded convolution, ReLU, 2x2 max-pool
(stride 2, ceil mode) and dropout. Dueling networks carry a separate value
head and centre the advantages over the unmasked actions.
"""
from __future__ import annotations

import io
import json
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .landscape import atomic_write_bytes

ARCHS = {
    "small": {"channels": (16, 32), "hidden": (512, 128)},
    "big": {"channels": (32, 64, 128), "hidden": (2048, 48, 32)},
}

CHECKPOINT_FORMAT = "firebreak-qnet"
CHECKPOINT_VERSION = 1


class StateError(RuntimeError):
    pass


class QOutput(NamedTuple):
    q: torch.Tensor                 # masked entries are -inf
    raw: torch.Tensor               # q before masking
    value: torch.Tensor | None      # (B,) for dueling networks
    advantage: torch.Tensor | None


def _mlp(n_in: int, hidden, n_out: int) -> nn.Sequential:
    layers, width = [], n_in
    for h in hidden:
        layers += [nn.Linear(width, h), nn.ReLU()]
        width = h
    layers.append(nn.Linear(width, n_out))
    return nn.Sequential(*layers)


class QNetwork(nn.Module):
    def __init__(self, in_channels: int, rows: int, cols: int, arch: str = "small",
                 dueling: bool = False, dropout: float = 0.1, seed: int = 0):
        super().__init__()
        if arch not in ARCHS:
            raise ValueError(f"unknown architecture {arch!r}")
        self.config = dict(in_channels=in_channels, rows=rows, cols=cols, arch=arch,
                           dueling=dueling, dropout=dropout)
        self.n_actions = rows * cols
        channels = ARCHS[arch]["channels"]
        hidden = ARCHS[arch]["hidden"]
        self.convs = nn.ModuleList()
        cin, h, w = in_channels, rows, cols
        for cout in channels:
            self.convs.append(nn.Conv2d(cin, cout, 3, padding=1))
            cin, h, w = cout, -(-h // 2), -(-w // 2)
        self.n_features = cin * h * w
        self.head = _mlp(self.n_features, hidden, self.n_actions)
        self.value_head = _mlp(self.n_features, hidden, 1) if dueling else None
        self.dropout_rng = torch.Generator().manual_seed(seed + 1)
        self._recorded = None
        self.reset_parameters(seed)

    @property
    def dueling(self) -> bool:
        return self.value_head is not None

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=gen)
                    nn.init.zeros_(m.bias)

    def _dropout(self, x: torch.Tensor) -> torch.Tensor:
        p = self.config["dropout"]
        if p <= 0:
            return x
        keep = torch.rand(x.shape, generator=self.dropout_rng) >= p
        return x * keep.to(x.dtype) / (1.0 - p)

    def features(self, x: torch.Tensor, training: bool = False):
        """Returns (last conv activation before pooling, flat features)."""
        act = None
        for conv in self.convs:
            act = F.relu(conv(x))
            x = F.max_pool2d(act, 2, 2, ceil_mode=True)
            if training:
                x = self._dropout(x)
        return act, x.flatten(1)

    def heads(self, feats: torch.Tensor, mask: torch.Tensor | None) -> QOutput:
        out = self.head(feats)
        if self.value_head is None:
            raw, value, adv = out, None, None
        else:
            adv = out
            value = self.value_head(feats).squeeze(1)
            if mask is None:
                mean = adv.mean(dim=1)
            else:
                m = mask.to(adv.dtype)
                mean = (adv * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)
            raw = value[:, None] + adv - mean[:, None]
        q = raw if mask is None else raw.masked_fill(~mask, float("-inf"))
        return QOutput(q, raw, value, adv)

    def evaluate(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                 training: bool = False) -> QOutput:
        if x.dim() != 4 or tuple(x.shape[1:]) != (self.config["in_channels"], self.config["rows"],
                                                  self.config["cols"]):
            raise ValueError(f"input shape {tuple(x.shape)} does not match network {self.config}")
        if mask is not None and tuple(mask.shape) != (x.shape[0], self.n_actions):
            raise ValueError(f"mask shape {tuple(mask.shape)} != ({x.shape[0]}, {self.n_actions})")
        _, feats = self.features(x, training)
        return self.heads(feats, mask)

    def forward(self, x, mask=None, training: bool = False) -> torch.Tensor:
        return self.evaluate(x, mask, training).q


def as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def forward(net: QNetwork, batch, mask=None, training: bool = False) -> torch.Tensor:
    """Masked q-values (B, rows*cols); the output is kept for :func:`backward`."""
    x = as_tensor(batch, dtype=next(net.parameters()).dtype)
    m = None if mask is None else as_tensor(mask, dtype=torch.bool)
    q = net(x, m, training)
    net._recorded = q if q.requires_grad else None
    return q


def backward(net: QNetwork, loss_grad) -> dict[str, torch.Tensor]:
    """Gradients of ``sum(loss_grad * q)`` w.r.t. every parameter of ``net``.

    Masked (-inf) outputs must receive zero ``loss_grad``.
    """
    if net._recorded is None:
        raise StateError("backward called without a recorded forward pass")
    out, net._recorded = net._recorded, None
    grad = as_tensor(loss_grad, dtype=out.dtype)
    finite = torch.isfinite(out)
    if torch.any(grad[~finite] != 0):
        raise ValueError("nonzero loss gradient on a masked output")
    net.zero_grad(set_to_none=True)
    params = list(net.parameters())
    grads = torch.autograd.grad(torch.where(finite, out, 0.0), params, grad_outputs=grad,
                                allow_unused=True)
    return {name: (torch.zeros_like(p) if g is None else g)
            for (name, p), g in zip(net.named_parameters(), grads)}


def make_optimizer(net: QNetwork, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(net: QNetwork, grads: dict[str, torch.Tensor], optimizer: torch.optim.Optimizer) -> None:
    """Apply one Adam update with externally computed gradients."""
    for name, p in net.named_parameters():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        p.grad = g.detach().clone()
    optimizer.step()


def sync_target(online: QNetwork, target: QNetwork) -> None:
    if online.config != target.config:
        raise ValueError("online and target networks have different architectures")
    target.load_state_dict(online.state_dict())


def clone(net: QNetwork) -> QNetwork:
    other = QNetwork(**net.config).to(next(net.parameters()).dtype)
    sync_target(net, other)
    return other


def l2_penalty(net: QNetwork) -> torch.Tensor:
    """Sum of squared weights (biases excluded)."""
    return sum((p * p).sum() for name, p in net.named_parameters() if name.endswith("weight"))


# --------------------------------------------------------------- GradCAM

def grad_cam(net: QNetwork, encoding, action: int, mask=None) -> np.ndarray:
    """Attention map (rows, cols) in [0, 1] for the output entry ``action``."""
    if not 0 <= action < net.n_actions:
        raise ValueError(f"action {action} outside [0, {net.n_actions})")
    dtype = next(net.parameters()).dtype
    x = as_tensor(encoding, dtype=dtype)
    if x.dim() == 3:
        x = x[None]
    m = None if mask is None else as_tensor(mask, dtype=torch.bool).reshape(1, -1)
    with torch.enable_grad():
        act, feats = net.features(x, training=False)
        act.retain_grad()
        out = net.heads(feats, m)
        out.raw[0, action].backward()
    grads = act.grad[0]
    weights = grads.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * act[0]).sum(dim=0)).detach()
    rows, cols = net.config["rows"], net.config["cols"]
    cam = F.interpolate(cam[None, None], size=(rows, cols), mode="nearest")[0, 0]
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    net.zero_grad(set_to_none=True)
    return cam.numpy().astype(np.float64)


# ------------------------------------------------------------ checkpoints
#
# A checkpoint is a NumPy ``.npz`` archive. Entry ``__meta__`` is a UTF-8
# JSON document {"format": "firebreak-qnet", "version": 1, "config": {...},
# "names": [...], "extra": {...}}; every other entry is one parameter
# tensor stored as float32 or float64 under its PyTorch name.

def checkpoint_bytes(net: QNetwork, extra: dict | None = None) -> bytes:
    state = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config": net.config, "names": list(state), "extra": extra or {}}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **state)
    return buf.getvalue()


def save_checkpoint(path, net: QNetwork, extra: dict | None = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(net, extra))


def load_checkpoint(path) -> tuple[QNetwork, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a Q-network checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        state = {name: torch.from_numpy(data[name].copy()) for name in meta["names"]}
    net = QNetwork(**meta["config"])
    net.load_state_dict(state)
    return net, meta["extra"]
