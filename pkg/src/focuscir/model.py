"""End-to-end composer: encoders, cached segmentations, focus mapping, revision and losses."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbones import Backbones, make_backbones
from .data import DatasetManifest, FeatureMatrix, HyperConfig, QueryTriplet
from .focus import DualFocusMapping
from .objective import LossBundle, pool, total_loss
from .preprocess import PreprocessMissing, SegmentationCache, load_source
from .revision import FocusRevision


class FocusComposer(nn.Module):
    """Learned head: dual focus mapping followed by focus revision."""

    def __init__(self, cfg: HyperConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.mapping = DualFocusMapping(cfg)
            self.revision = FocusRevision(cfg)
        self.to(cfg.torch_dtype)

    def compose(self, focused_ref: torch.Tensor, focused_mod: torch.Tensor) -> torch.Tensor:
        return self.revision(focused_ref, focused_mod, additive="no_revision" in self.cfg.ablation_flags)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


@dataclass
class ImageBatch:
    local: torch.Tensor      # (B, C, D_I)
    seg_local: torch.Tensor  # (B, C, D_I)


@dataclass
class TextBatch:
    tokens: torch.Tensor  # (B, S, D_T)
    mask: torch.Tensor    # (B, S)


class Retriever:
    """Everything needed to turn triplets into composed and target embeddings."""

    def __init__(self, cfg: HyperConfig, manifest: DatasetManifest, cache: SegmentationCache,
                 backbones: Backbones | None = None, model: FocusComposer | None = None):
        self.cfg = cfg
        self.manifest = manifest
        self.cache = cache
        self.backbones = backbones or make_backbones(cfg)
        self.model = model or FocusComposer(cfg)
        self._features: dict[tuple[str, str], torch.Tensor] = {}
        self._sources: dict[str, object] = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.cfg.torch_dtype

    def _frozen(self, encoder) -> bool:
        return not (isinstance(encoder, nn.Module) and any(p.requires_grad for p in encoder.parameters()))

    def _encode(self, key: tuple[str, str], fn):
        enc = self.backbones.image
        if not self._frozen(enc):
            return fn()
        if key not in self._features:
            with torch.no_grad():
                self._features[key] = fn()
        return self._features[key]

    def _source(self, image_id: str):
        if image_id not in self._sources:
            self._sources[image_id] = load_source(self.manifest.image_index[image_id])
        return self._sources[image_id]

    def image_batch(self, image_ids: Sequence[str]) -> ImageBatch:
        missing = [i for i in image_ids if self.cache.get(i) is None]
        if missing:
            raise PreprocessMissing(missing)
        enc = self.backbones.image
        locals_, segs = [], []
        for image_id in image_ids:
            rec = self.cache.get(image_id)
            f_l = self._encode((enc.backbone_id, rec.content_hash),
                               lambda: enc.penultimate(self._source(image_id)))
            f_s = self._encode((enc.backbone_id, "seg:" + rec.content_hash),
                               lambda: enc.penultimate(rec.segmented_image))
            locals_.append(FeatureMatrix(f_l, "local_visual", self.cfg).data)
            segs.append(FeatureMatrix(f_s, "local_visual", self.cfg).data)
        return ImageBatch(torch.stack(locals_).to(self.dtype), torch.stack(segs).to(self.dtype))

    def text_batch(self, texts: Sequence[str]) -> TextBatch:
        enc = self.backbones.text
        tokens, masks = [], []
        for text in texts:
            t, m = enc.penultimate(text) if not self._frozen(enc) else self._text_cached(text)
            tokens.append(FeatureMatrix(t, "text_tokens", self.cfg).data)
            masks.append(m)
        return TextBatch(torch.stack(tokens).to(self.dtype), torch.stack(masks))

    def _text_cached(self, text: str):
        key = (self.backbones.text.backbone_id, "text:" + text)
        if key not in self._features:
            with torch.no_grad():
                self._features[key] = self.backbones.text.penultimate(text)
        return self._features[key]

    # -- forward paths -----------------------------------------------------

    def focused_reference(self, images: ImageBatch):
        final = self.backbones.image.final
        focused, _, _ = self.model.mapping.visual_path(images.local, images.seg_local, final, "ref")
        return focused

    def focused_modification(self, texts: TextBatch, ref_images: ImageBatch):
        f_g_m = self.backbones.text.final(texts.tokens, texts.mask)
        f_seg_g = self.backbones.image.final(ref_images.seg_local)
        focused, _, _ = self.model.mapping.text_path(texts.tokens, texts.mask, f_g_m, f_seg_g)
        return focused

    def focused_target(self, images: ImageBatch):
        final = self.backbones.image.final
        focused, _, _ = self.model.mapping.visual_path(images.local, images.seg_local, final, "tgt")
        return focused

    def composed(self, ref_ids: Sequence[str], texts: Sequence[str]) -> torch.Tensor:
        """Composed features (B, P, D) for (reference, text) queries."""
        ref = self.image_batch(ref_ids)
        fr = self.focused_reference(ref)
        fm = self.focused_modification(self.text_batch(texts), ref)
        return self.model.compose(fr, fm)

    def targets(self, image_ids: Sequence[str]) -> torch.Tensor:
        return self.focused_target(self.image_batch(image_ids))

    def batch_loss(self, triplets: Sequence[QueryTriplet]) -> LossBundle:
        fc = self.composed([t.ref_image_id for t in triplets], [t.mod_text for t in triplets])
        ft = self.targets([t.target_image_id for t in triplets])
        return total_loss(pool(fc), pool(ft), self.cfg)

    @torch.no_grad()
    def query_embeddings(self, ref_ids: Sequence[str], texts: Sequence[str], chunk: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(ref_ids), chunk):
            out.append(pool(self.composed(ref_ids[i:i + chunk], texts[i:i + chunk])))
        return _normalized(out, self.cfg.D)

    @torch.no_grad()
    def target_embeddings(self, image_ids: Sequence[str], chunk: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(image_ids), chunk):
            out.append(pool(self.targets(image_ids[i:i + chunk])))
        return _normalized(out, self.cfg.D)


def _normalized(chunks: list[torch.Tensor], width: int) -> np.ndarray:
    if not chunks:
        return np.zeros((0, width))
    x = torch.cat(chunks).double()
    return (x / x.norm(dim=-1, keepdim=True)).numpy()
