"""Text-guided focus revision: gate reference and modification features and sum them."""
from __future__ import annotations

import torch
from torch import nn

from .data import HyperConfig, ShapeError


def _mean_reducer(P: int) -> torch.Tensor:
    w = torch.zeros(P, 2 * P)
    idx = torch.arange(P)
    w[idx, idx] = 0.5
    w[idx, idx + P] = 0.5
    return w


class FocusRevision(nn.Module):
    def __init__(self, cfg: HyperConfig):
        super().__init__()
        self.P, self.D = cfg.P, cfg.D
        self.reduce_ref = nn.Parameter(_mean_reducer(cfg.P))
        self.reduce_mod = nn.Parameter(_mean_reducer(cfg.P))
        self.gate_in = nn.Linear(2 * cfg.D, cfg.D)
        self.gate_out = nn.Linear(cfg.D, 2 * cfg.D)

    def forward(self, focused_ref: torch.Tensor, focused_mod: torch.Tensor, additive: bool = False):
        fr = reduce_channels(focused_ref, self.reduce_ref)
        fm = reduce_channels(focused_mod, self.reduce_mod)
        if additive:
            return fr + fm
        alpha, beta = revision_weights(fr, fm, self)
        return compose(alpha, beta, fr, fm)


def reduce_channels(focused: torch.Tensor, reducer: torch.Tensor) -> torch.Tensor:
    """Linear map across the focus-channel axis, 2P rows -> P rows."""
    if focused.shape[-2] != reducer.shape[-1]:
        raise ShapeError(f"reducer expects {reducer.shape[-1]} channels, got {focused.shape[-2]}")
    return reducer @ focused


def revision_weights(fr: torch.Tensor, fm: torch.Tensor, params: FocusRevision):
    """Sigmoid gates (alpha for the reference, beta for the modification), each P x D."""
    if fr.shape != fm.shape:
        raise ShapeError(f"reference {tuple(fr.shape)} vs modification {tuple(fm.shape)}")
    hidden = torch.relu(params.gate_in(torch.cat([fr, fm], dim=-1)))
    w_r = torch.sigmoid(params.gate_out(hidden))
    alpha, beta = w_r.chunk(2, dim=-1)
    return alpha, beta


def compose(alpha, beta, fr, fm) -> torch.Tensor:
    return alpha * fr + beta * fm
