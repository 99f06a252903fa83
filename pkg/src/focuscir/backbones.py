"""Split encoders, captioner and segmenter: seeded stubs and pretrained adapters.

Every encoder exposes ``penultimate`` (image/text -> local features) and
``final`` (local features -> one L2-normalised row).  The split sits at the
last transformer block: ``final`` is that block plus the output projection, so
fused local features can be pushed through it again.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import ConfigError, FeatureMatrix, HyperConfig
from .synthetic import SLOTS, VOCAB, AttributeImage, VocabularyError

VOCAB_SIZE = sum(len(VOCAB[s]) for s in SLOTS)
_OFFSETS = np.cumsum([0] + [len(VOCAB[s]) for s in SLOTS])[:-1]


class BackboneUnavailable(RuntimeError):
    """A pretrained checkpoint could not be found locally."""


def attribute_vector(image: AttributeImage | dict) -> torch.Tensor:
    """Concatenated one-hot encoding of the five attribute slots; zeroed slots stay zero."""
    if isinstance(image, dict):
        image = AttributeImage.from_record(image)
    vec = torch.zeros(VOCAB_SIZE, dtype=torch.float64)
    for offset, slot in zip(_OFFSETS, SLOTS):
        value = getattr(image, slot)
        if value is None:
            continue
        try:
            vec[offset + VOCAB[slot].index(value)] = 1.0
        except ValueError:
            raise VocabularyError(f"{slot}={value!r}") from None
    return vec


def _gaussian(gen: torch.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64) * scale


class _ResidualPoolHead(nn.Module):
    """Frozen last block of a stub encoder: residual tanh block, masked mean, projection."""

    def __init__(self, gen: torch.Generator, width: int, out: int):
        super().__init__()
        self.register_buffer("block_w", _gaussian(gen, width, width, scale=width ** -0.5))
        self.register_buffer("block_b", _gaussian(gen, width, scale=0.1))
        self.register_buffer("proj", _gaussian(gen, width, out, scale=width ** -0.5))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        h = x + torch.tanh(x @ self.block_w.to(x.dtype) + self.block_b.to(x.dtype))
        if mask is None:
            pooled = h.mean(dim=-2)
        else:
            m = mask.to(h.dtype).unsqueeze(-1)
            pooled = (h * m).sum(dim=-2) / m.sum(dim=-2).clamp_min(1.0)
        out = pooled @ self.proj.to(x.dtype)
        return F.normalize(out, dim=-1).unsqueeze(-2)


class StubImageEncoder(nn.Module):
    """Seeded linear map of attribute one-hots with a per-channel positional bias.

    Channel ``c`` listens mostly to attribute slot ``c mod 5``, so noise
    attributes perturb only some channels, like background pixels in a real
    image perturb only some patches.
    """

    def __init__(self, cfg: HyperConfig, seed: int = 0):
        super().__init__()
        self.C, self.D_I, self.D = cfg.C, cfg.D_I, cfg.D
        self.seed = seed
        self.backbone_id = f"stub-image-s{seed}-C{cfg.C}-I{cfg.D_I}-D{cfg.D}"
        gen = torch.Generator().manual_seed(seed)
        gain = torch.full((cfg.C, VOCAB_SIZE), 0.3, dtype=torch.float64)
        for c in range(cfg.C):
            slot = c % len(SLOTS)
            gain[c, _OFFSETS[slot]:_OFFSETS[slot] + len(VOCAB[SLOTS[slot]])] = 1.0
        weight = _gaussian(gen, cfg.C, VOCAB_SIZE, cfg.D_I) * gain.unsqueeze(-1)
        self.register_buffer("weight", weight)
        self.register_buffer("bias", F.normalize(_gaussian(gen, cfg.C, cfg.D_I), dim=-1))
        self.head = _ResidualPoolHead(gen, cfg.D_I, cfg.D)
        self.calls = 0

    def penultimate(self, image: AttributeImage | dict) -> torch.Tensor:
        self.calls += 1
        onehot = attribute_vector(image)
        x = torch.einsum("v,cvd->cd", onehot, self.weight) + self.bias
        return F.normalize(x, dim=-1)

    def final(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(x)


class StubTextEncoder(nn.Module):
    """Hash-seeded word vectors plus positional offsets, truncated/padded to S tokens."""

    def __init__(self, cfg: HyperConfig, seed: int = 0):
        super().__init__()
        self.S, self.D_T, self.D = cfg.S, cfg.D_T, cfg.D
        self.seed = seed
        self.backbone_id = f"stub-text-s{seed}-S{cfg.S}-T{cfg.D_T}-D{cfg.D}"
        gen = torch.Generator().manual_seed(seed + 1)
        self.register_buffer("positions", _gaussian(gen, cfg.S, cfg.D_T, scale=0.2))
        self.head = _ResidualPoolHead(gen, cfg.D_T, cfg.D)
        self._words: dict[str, torch.Tensor] = {}

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return re.findall(r"[a-z0-9]+", text.lower())

    def _word(self, word: str) -> torch.Tensor:
        if word not in self._words:
            digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            self._words[word] = torch.from_numpy(rng.standard_normal(self.D_T))
        return self._words[word]

    def penultimate(self, text: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (S x D_T tokens, S-long bool mask with True on real tokens)."""
        words = self.tokenize(text)[: self.S]
        tokens = torch.zeros(self.S, self.D_T, dtype=torch.float64)
        mask = torch.zeros(self.S, dtype=torch.bool)
        for i, w in enumerate(words):
            tokens[i] = F.normalize(self._word(w) + self.positions[i], dim=-1)
            mask[i] = True
        return tokens, mask

    def final(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.head(x, mask)


class StubCaptioner:
    """Names the dominant attributes of an attribute image."""

    def __init__(self):
        self.calls = 0

    def __call__(self, image: AttributeImage | dict) -> str:
        self.calls += 1
        if isinstance(image, dict):
            image = AttributeImage.from_record(image)
        words = [w for w in (image.color, image.pattern, image.object_class) if w]
        return "a " + " ".join(words) if words else "an empty image"


class StubSegmenter:
    """Keeps attributes named in the caption and zeroes the rest."""

    def __init__(self):
        self.calls = 0

    def __call__(self, image: AttributeImage | dict, caption: str) -> AttributeImage:
        self.calls += 1
        if isinstance(image, dict):
            image = AttributeImage.from_record(image)
        return image.keep_only(set(StubTextEncoder.tokenize(caption)))


# ---------------------------------------------------------------------------
# Pretrained adapters
# ---------------------------------------------------------------------------


def _load(kind: str, loader, checkpoint: str, **kwargs):
    try:
        return loader.from_pretrained(checkpoint, local_files_only=True, **kwargs)
    except (OSError, ValueError) as exc:
        raise BackboneUnavailable(
            f"{kind} checkpoint {checkpoint!r} is not available locally; download it "
            f"(e.g. `huggingface-cli download {checkpoint}`) or point the config at a local copy"
        ) from exc


def _tower_config(checkpoint: str, tower: str):
    """Sub-config of a joint CLIP checkpoint, carrying the joint projection width."""
    from transformers import AutoConfig

    config = _load(f"{tower} config", AutoConfig, checkpoint)
    sub = getattr(config, f"{tower}_config", None)
    if sub is None:
        return config
    if getattr(config, "projection_dim", None) is not None:
        sub.projection_dim = config.projection_dim
    return sub


class ClipImageAdapter(nn.Module):
    """CLIP vision tower split before its last encoder layer."""

    def __init__(self, checkpoint: str, trainable: bool = True):
        super().__init__()
        from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection

        self.model = _load("image encoder", CLIPVisionModelWithProjection, checkpoint,
                           config=_tower_config(checkpoint, "vision"), attn_implementation="eager")
        self.processor = _load("image processor", CLIPImageProcessor, checkpoint)
        vc = self.model.config
        self.C = (vc.image_size // vc.patch_size) ** 2 + 1
        self.D_I = vc.hidden_size
        self.D = vc.projection_dim
        self.backbone_id = f"clip-image:{checkpoint}"
        self.model.requires_grad_(trainable)

    def penultimate(self, image) -> torch.Tensor:
        pixels = self.processor(images=image, return_tensors="pt")["pixel_values"]
        pixels = pixels.to(next(self.model.parameters()).dtype)
        out = self.model.vision_model(pixel_values=pixels, output_hidden_states=True)
        return out.hidden_states[-2][0]

    def final(self, x: torch.Tensor) -> torch.Tensor:
        vm = self.model.vision_model
        squeeze = x.dim() == 2
        h = x.unsqueeze(0) if squeeze else x
        lead = h.shape[:-2]
        h = h.reshape(-1, *h.shape[-2:])
        h = vm.encoder.layers[-1](h, None)
        pooled = vm.post_layernorm(h[:, 0, :])
        out = F.normalize(self.model.visual_projection(pooled), dim=-1).unsqueeze(-2)
        out = out.reshape(*lead, 1, -1)
        return out[0] if squeeze else out


class ClipTextAdapter(nn.Module):
    """CLIP text tower split before its last encoder layer; pooled at the end-of-text token."""

    def __init__(self, checkpoint: str, seq_len: int | None = None, trainable: bool = True):
        super().__init__()
        from transformers import AutoTokenizer, CLIPTextModelWithProjection

        self.model = _load("text encoder", CLIPTextModelWithProjection, checkpoint,
                           config=_tower_config(checkpoint, "text"), attn_implementation="eager")
        self.tokenizer = _load("tokenizer", AutoTokenizer, checkpoint)
        tc = self.model.config
        self.S = seq_len or tc.max_position_embeddings
        self.D_T = tc.hidden_size
        self.D = tc.projection_dim
        self.backbone_id = f"clip-text:{checkpoint}"
        self.model.requires_grad_(trainable)

    def penultimate(self, text: str) -> tuple[torch.Tensor, torch.Tensor]:
        enc = self.tokenizer([text], padding="max_length", truncation=True, max_length=self.S,
                             return_tensors="pt")
        out = self.model.text_model(input_ids=enc["input_ids"], attention_mask=enc["attention_mask"],
                                    output_hidden_states=True)
        return out.hidden_states[-2][0], enc["attention_mask"][0].bool()

    def final(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        tm = self.model.text_model
        squeeze = x.dim() == 2
        h = x.unsqueeze(0) if squeeze else x
        m = mask.unsqueeze(0) if squeeze else mask
        S = h.shape[-2]
        allowed = torch.tril(torch.ones(S, S, dtype=torch.bool)) & m[:, None, :]
        allowed = allowed | torch.eye(S, dtype=torch.bool)
        additive = torch.zeros(allowed.shape, dtype=h.dtype).masked_fill(~allowed, torch.finfo(h.dtype).min)
        h = tm.encoder.layers[-1](h, additive[:, None])
        h = tm.final_layer_norm(h)
        last = m.long().sum(-1).clamp_min(1) - 1
        pooled = h[torch.arange(h.shape[0]), last]
        out = F.normalize(self.model.text_projection(pooled), dim=-1).unsqueeze(-2)
        return out[0] if squeeze else out


class Blip2Captioner:
    """Greedy BLIP-2 captioning (deterministic, so cached captions are stable)."""

    def __init__(self, checkpoint: str, max_new_tokens: int = 30):
        from transformers import Blip2ForConditionalGeneration, Blip2Processor

        self.model = _load("captioner", Blip2ForConditionalGeneration, checkpoint)
        self.processor = _load("captioner processor", Blip2Processor, checkpoint)
        self.max_new_tokens = max_new_tokens
        self.calls = 0

    @torch.no_grad()
    def __call__(self, image) -> str:
        self.calls += 1
        inputs = self.processor(images=image, return_tensors="pt")
        ids = self.model.generate(**inputs, do_sample=False, num_beams=1, max_new_tokens=self.max_new_tokens)
        return self.processor.batch_decode(ids, skip_special_tokens=True)[0].strip()


class ClipSegSegmenter:
    """Multiplies the image by CLIPSeg's soft mask for the caption, rescaled to [0, 1]."""

    def __init__(self, checkpoint: str):
        from transformers import CLIPSegForImageSegmentation, CLIPSegProcessor

        self.model = _load("segmenter", CLIPSegForImageSegmentation, checkpoint)
        self.processor = _load("segmenter processor", CLIPSegProcessor, checkpoint)
        self.calls = 0

    @torch.no_grad()
    def __call__(self, image, caption: str):
        from PIL import Image

        self.calls += 1
        image = image.convert("RGB")
        inputs = self.processor(text=[caption], images=[image], return_tensors="pt", padding=True)
        logits = self.model(**inputs).logits.reshape(1, 1, *inputs["pixel_values"].shape[-2:])
        soft = torch.sigmoid(logits)
        soft = F.interpolate(soft, size=(image.height, image.width), mode="bilinear", align_corners=False)[0, 0]
        soft = soft / soft.max().clamp_min(1e-12)
        pixels = torch.from_numpy(np.asarray(image, dtype=np.float32))
        masked = (pixels * soft.unsqueeze(-1)).round().clamp(0, 255).to(torch.uint8).numpy()
        return Image.fromarray(masked)


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------


@dataclass
class Backbones:
    image: Any
    text: Any
    captioner: Any
    segmenter: Any

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = []
        for enc in (self.image, self.text):
            if isinstance(enc, nn.Module):
                params.extend(p for p in enc.parameters() if p.requires_grad)
        return params


def stub_backbones(cfg: HyperConfig) -> Backbones:
    return Backbones(
        image=StubImageEncoder(cfg, seed=cfg.backbone_seed),
        text=StubTextEncoder(cfg, seed=cfg.backbone_seed),
        captioner=StubCaptioner(),
        segmenter=StubSegmenter(),
    )


def adapter_backbones(cfg: HyperConfig) -> Backbones:
    if cfg.profile == "stub":
        raise ConfigError(["the stub profile never loads pretrained adapters"])
    image = ClipImageAdapter(cfg.image_backbone, trainable=cfg.train_backbone)
    text = ClipTextAdapter(cfg.image_backbone, seq_len=cfg.S, trainable=cfg.train_backbone)
    problems = []
    for name, have, want in (("C", image.C, cfg.C), ("D_I", image.D_I, cfg.D_I),
                             ("D", image.D, cfg.D), ("D_T", text.D_T, cfg.D_T)):
        if have != want:
            problems.append(f"{name}={want} but checkpoint has {have}")
    if problems:
        raise ConfigError(problems)
    return Backbones(image=image, text=text,
                     captioner=Blip2Captioner(cfg.captioner_backbone),
                     segmenter=ClipSegSegmenter(cfg.segmenter_backbone))


def make_backbones(cfg: HyperConfig) -> Backbones:
    return stub_backbones(cfg) if cfg.profile == "stub" else adapter_backbones(cfg)


def stub_image_encode(image_attrs: AttributeImage | dict, seed: int, cfg: HyperConfig) -> FeatureMatrix:
    enc = StubImageEncoder(cfg, seed=seed)
    return FeatureMatrix(enc.penultimate(image_attrs), "local_visual", cfg)


def adapter_forward(model_ref: str, inputs, cfg: HyperConfig, kind: str = "image") -> Any:
    """One-off adapter call: ``kind`` is image, text, caption or segment."""
    if cfg.profile == "stub":
        raise ConfigError(["the stub profile never calls pretrained adapters"])
    if kind == "image":
        enc = ClipImageAdapter(model_ref)
        with torch.no_grad():
            return FeatureMatrix(enc.penultimate(inputs), "local_visual")
    if kind == "text":
        enc = ClipTextAdapter(model_ref, seq_len=cfg.S)
        with torch.no_grad():
            return enc.penultimate(inputs)
    if kind == "caption":
        return Blip2Captioner(model_ref)(inputs)
    if kind == "segment":
        image, caption = inputs
        return ClipSegSegmenter(model_ref)(image, caption)
    raise ValueError(f"unknown adapter kind {kind!r}")
