"""Dual focus mapping: visual and textual focus mapping plus multi-grained focus projection.

Tensors carry optional leading batch dimensions; the last two axes are
(channels, features).  All "1x1 convolutions" are per-position linear maps.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .data import FeatureMatrix, HyperConfig, ShapeError


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention with square, bias-free projections."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.w_q = nn.Parameter(torch.randn(d, d) * d ** -0.5)
        self.w_k = nn.Parameter(torch.randn(d, d) * d ** -0.5)
        self.w_v = nn.Parameter(torch.eye(d) + torch.randn(d, d) * 0.1 * d ** -0.5)

    def weights(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if q.shape[-1] != self.d or kv.shape[-1] != self.d:
            raise ShapeError(f"cross attention of width {self.d} got {q.shape[-1]} and {kv.shape[-1]}")
        scores = (q @ self.w_q) @ (kv @ self.w_k).transpose(-1, -2) / math.sqrt(self.d)
        return torch.softmax(scores, dim=-1)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        return self.weights(q, kv) @ (kv @ self.w_v)


def cross_attend(q, kv, unit: CrossAttention):
    """Attend from ``q`` onto ``kv``; accepts tensors or FeatureMatrix objects."""
    if isinstance(q, FeatureMatrix):
        out = unit(q.data, kv.data)
        return FeatureMatrix(out, "attended")
    return unit(q, kv)


class FocusProjection(nn.Module):
    """Projects K source channels onto P focus channels with row-stochastic weights."""

    def __init__(self, D: int, P: int):
        super().__init__()
        self.P = P
        self.hidden = max(P, math.ceil(D / 2))
        self.conv1 = nn.Linear(D, self.hidden)
        self.conv2 = nn.Linear(self.hidden, P)

    def weights(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        logits = self.conv2(torch.tanh(self.conv1(x))).transpose(-1, -2)  # (..., P, K)
        if mask is not None:
            logits = logits.masked_fill(~mask.unsqueeze(-2), float("-inf"))
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        w = self.weights(x, mask)
        return w @ x, w


def mgfp(ftilde: torch.Tensor, params: FocusProjection, P: int | None = None,
         mask: torch.Tensor | None = None):
    """(weighted P x D, projection weights P x K)."""
    if P is not None and P != params.P:
        raise ShapeError(f"projection built for P={params.P}, asked for P={P}")
    return params(ftilde, mask)


def average_projection(ftilde: torch.Tensor, P: int, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over source channels replicated to P rows; stands in for the learned projection."""
    if mask is None:
        mean = ftilde.mean(dim=-2, keepdim=True)
    else:
        m = mask.to(ftilde.dtype).unsqueeze(-1)
        mean = (ftilde * m).sum(dim=-2, keepdim=True) / m.sum(dim=-2, keepdim=True).clamp_min(1.0)
    return mean.expand(*ftilde.shape[:-2], P, ftilde.shape[-1])


def focused_feature(local_weighted: torch.Tensor, global_weighted: torch.Tensor) -> torch.Tensor:
    if local_weighted.shape != global_weighted.shape:
        raise ShapeError(f"local {tuple(local_weighted.shape)} vs global {tuple(global_weighted.shape)}")
    return torch.cat([local_weighted, global_weighted], dim=-2)


def split_focused(focused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    P = focused.shape[-2] // 2
    return focused[..., :P, :], focused[..., P:, :]


class VisualFocus(nn.Module):
    def __init__(self, cfg: HyperConfig):
        super().__init__()
        self.seg_query = CrossAttention(cfg.D_I)   # Q = segmentation, KV = image
        self.image_query = CrossAttention(cfg.D_I)  # Q = image, KV = segmentation
        self.fuse = nn.Linear(2 * cfg.D_I, cfg.D_I, bias=False)
        self.fc = nn.Linear(cfg.D_I, cfg.D)
        self.to_backbone = nn.Linear(cfg.D, cfg.D_I)


def vfm_local(f_l: torch.Tensor, f_seg: torch.Tensor, params: VisualFocus) -> torch.Tensor:
    if f_l.shape != f_seg.shape:
        raise ShapeError(f"image {tuple(f_l.shape)} vs segmentation {tuple(f_seg.shape)}")
    attended = params.seg_query(f_seg, f_l)
    attended_seg = params.image_query(f_l, f_seg)
    fused = params.fuse(torch.cat([attended, attended_seg], dim=-1))
    return params.fc(fused)


def vfm_global(f_l: torch.Tensor, f_seg: torch.Tensor, f_tilde: torch.Tensor, encoder_final,
               params: VisualFocus) -> torch.Tensor:
    rows = [encoder_final(f_l), encoder_final(f_seg), encoder_final(params.to_backbone(f_tilde))]
    return torch.cat(rows, dim=-2)


class TextualFocus(nn.Module):
    def __init__(self, cfg: HyperConfig):
        super().__init__()
        self.seg_query = CrossAttention(cfg.D)   # Q = segmentation global, KV = text global
        self.text_query = CrossAttention(cfg.D)  # Q = text global, KV = segmentation global
        self.fuse = nn.Linear(2 * cfg.D, cfg.D, bias=False)
        self.fc = nn.Linear(cfg.D_T, cfg.D)


def tfm(f_g_m: torch.Tensor, f_seg_g: torch.Tensor, f_tokens: torch.Tensor, params: TextualFocus):
    """(global stack 3 x D, local S x D) for the modification text."""
    attended_text = params.seg_query(f_seg_g, f_g_m)
    attended_seg = params.text_query(f_g_m, f_seg_g)
    fused = params.fuse(torch.cat([attended_text, attended_seg], dim=-1))
    return torch.cat([f_g_m, f_seg_g, fused], dim=-2), params.fc(f_tokens)


class DualFocusMapping(nn.Module):
    """All learned focus-mapping parameters, with ablation-aware reference/modification/target paths."""

    STREAMS = ("ref", "mod", "tgt")

    def __init__(self, cfg: HyperConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisualFocus(cfg)
        self.textual = TextualFocus(cfg)
        self.projections = nn.ModuleDict({
            f"{s}_{g}": FocusProjection(cfg.D, cfg.P) for s in self.STREAMS for g in ("local", "global")
        })

    def _project(self, stream: str, local, global_, mask=None, average: bool = False):
        P = self.cfg.P
        if average:
            lw = average_projection(local, P, mask)
            gw = average_projection(global_, P)
        else:
            lw, _ = self.projections[f"{stream}_local"](local, mask)
            gw, _ = self.projections[f"{stream}_global"](global_)
        return focused_feature(lw, gw)

    def visual_path(self, f_l, f_seg, encoder_final, stream: str):
        """(focused 2P x D, local C x D, global 3 x D) for the reference or target image."""
        flags = self.cfg.ablation_flags
        raw = bool({"no_FM", "no_VFM"} & flags) or (stream == "tgt" and "no_target_VFM" in flags)
        if raw:
            local = self.visual.fc(f_l)
            g = encoder_final(f_l)
            global_ = torch.cat([g, g, encoder_final(self.visual.to_backbone(local))], dim=-2)
        else:
            local = vfm_local(f_l, f_seg, self.visual)
            global_ = vfm_global(f_l, f_seg, local, encoder_final, self.visual)
        average = "no_MGFP" in flags or (stream == "tgt" and "no_target_MGFP" in flags)
        return self._project(stream, local, global_, average=average), local, global_

    def text_path(self, f_tokens, mask, f_g_m, f_seg_g):
        """(focused 2P x D, local S x D, global 3 x D) for the modification text."""
        flags = self.cfg.ablation_flags
        if {"no_FM", "no_TFM"} & flags:
            local = self.textual.fc(f_tokens)
            global_ = torch.cat([f_g_m, f_g_m, f_g_m], dim=-2)
        else:
            global_, local = tfm(f_g_m, f_seg_g, f_tokens, self.textual)
        average = "no_MGFP" in flags
        return self._project("mod", local, global_, mask=mask, average=average), local, global_


def run_vfm(image, seg_record, backbones, params: DualFocusMapping, cfg: HyperConfig,
            stream: str = "ref") -> FeatureMatrix:
    """Focused feature of one image from its source and its cached segmentation record."""
    from .preprocess import PreprocessMissing

    if seg_record is None:
        raise PreprocessMissing([getattr(image, "image_id", "<image>")])
    enc = backbones.image
    f_l = FeatureMatrix(enc.penultimate(image), "local_visual", cfg).data.to(cfg.torch_dtype)
    f_seg = FeatureMatrix(enc.penultimate(seg_record.segmented_image), "local_visual", cfg).data.to(cfg.torch_dtype)
    focused, _, _ = params.visual_path(f_l, f_seg, enc.final, stream)
    return FeatureMatrix(focused, "focused", cfg)


def run_tfm(mod_text: str, seg_record, backbones, params: DualFocusMapping, cfg: HyperConfig) -> FeatureMatrix:
    """Focused feature of a modification text, guided by the reference segmentation record."""
    from .preprocess import PreprocessMissing

    if seg_record is None:
        raise PreprocessMissing(["<reference image>"])
    tokens, mask = backbones.text.penultimate(mod_text)
    FeatureMatrix(tokens, "text_tokens", cfg)
    tokens = tokens.to(cfg.torch_dtype)
    f_g_m = backbones.text.final(tokens, mask)
    f_seg = backbones.image.penultimate(seg_record.segmented_image).to(cfg.torch_dtype)
    f_seg_g = backbones.image.final(f_seg)
    focused, _, _ = params.text_path(tokens, mask, f_g_m, f_seg_g)
    return FeatureMatrix(focused, "focused", cfg)
