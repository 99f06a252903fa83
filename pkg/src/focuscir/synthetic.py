"""Desk-scale attribute-image dataset whose retrieval ground truth is unique by construction."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import DatasetManifest, QueryTriplet, canonical_json

DOMINANT_SLOTS = ("object_class", "color", "pattern")
NOISE_SLOTS = ("background", "clutter")
SLOTS = DOMINANT_SLOTS + NOISE_SLOTS

VOCAB: dict[str, tuple[str, ...]] = {
    "object_class": ("dog", "cat", "sled", "shirt", "dress", "shoe", "bag", "hat"),
    "color": ("red", "blue", "green", "yellow", "black", "white", "purple", "orange"),
    "pattern": ("plain", "striped", "dotted", "checked", "floral", "plaid"),
    "background": ("tree", "beach", "street", "studio", "snow", "forest"),
    "clutter": ("leaves", "people", "cars", "rocks", "boxes"),
}

_TEMPLATES = {
    "object_class": "replace the {old} with a {new}",
    "color": "change color to {new}",
    "pattern": "make the pattern {new}",
}


class VocabularyError(KeyError):
    pass


@dataclass(frozen=True)
class AttributeImage:
    """Symbolic image: dominant attributes plus noise attributes. ``None`` marks a zeroed slot."""

    object_class: str | None = None
    color: str | None = None
    pattern: str | None = None
    background: str | None = None
    clutter: str | None = None

    def __post_init__(self):
        for slot in SLOTS:
            value = getattr(self, slot)
            if value is not None and value not in VOCAB[slot]:
                raise VocabularyError(f"{slot}={value!r} is not in the vocabulary")

    @property
    def image_id(self) -> str:
        return "syn-" + self.content_hash[:16]

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_record())).hexdigest()

    def dominant(self) -> tuple:
        return tuple(getattr(self, s) for s in DOMINANT_SLOTS)

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "AttributeImage":
        unknown = set(rec) - set(SLOTS)
        if unknown:
            raise VocabularyError(f"unknown attribute slots {sorted(unknown)}")
        return cls(**{k: rec.get(k) for k in SLOTS})

    def keep_only(self, words: set[str]) -> "AttributeImage":
        return replace(self, **{s: None for s in SLOTS if getattr(self, s) not in words})


def _edit_text(slot: str, old: str, new: str) -> str:
    return _TEMPLATES[slot].format(old=old, new=new)


def split_sizes(n: int, fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def gen_synthetic(n_triplets: int, seed: int = 0, noise_level: float = 0.5,
                  fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
                  name: str = "synthetic", reuse: float = 0.0) -> DatasetManifest:
    """Generate ``n_triplets`` edit triplets split train/val/test by ``fractions``.

    With probability ``reuse`` a triplet starts from an image already in its
    split instead of a fresh one, so images recur across triplets the way
    catalogue images do in real datasets.
    """
    if n_triplets < 0:
        raise ValueError("n_triplets must be ≥ 0")
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError("noise_level must lie in [0, 1]")
    if not 0.0 <= reuse <= 1.0:
        raise ValueError("reuse must lie in [0, 1]")
    # Dominant choices and noise draws use separate streams so that sweeping
    # noise_level never changes the dominant attributes of any image.
    dom_rng = np.random.default_rng([seed, 0])
    noise_rng = np.random.default_rng([seed, 1])

    def pick(rng, slot, exclude=None):
        choices = [v for v in VOCAB[slot] if v != exclude]
        return choices[int(rng.integers(len(choices)))]

    image_index: dict[str, dict] = {}
    triplets: list[QueryTriplet] = []
    galleries: dict[str, list[str]] = {}
    sizes = split_sizes(n_triplets, fractions)
    qid = 0
    for split, size in zip(("train", "val", "test"), sizes):
        by_dominant: dict[tuple, AttributeImage] = {}
        gallery: dict[str, None] = {}
        made = 0
        attempts = 0
        while made < size:
            attempts += 1
            if attempts > 200 * (size + 1):
                raise RuntimeError("vocabulary too small for the requested number of triplets")
            dom = {s: pick(dom_rng, s) for s in DOMINANT_SLOTS}
            u_reuse, j_reuse = dom_rng.random(), dom_rng.integers(1 << 30)
            if by_dominant and u_reuse < reuse:
                existing = list(by_dominant)
                dom = dict(zip(DOMINANT_SLOTS, existing[int(j_reuse) % len(existing)]))
            n_edits = 1 + int(dom_rng.integers(2))
            order = dom_rng.permutation(len(DOMINANT_SLOTS))[:n_edits]
            edited = [DOMINANT_SLOTS[i] for i in sorted(order)]
            new_values = {s: pick(dom_rng, s, exclude=dom[s]) for s in edited}
            ref_noise = {s: pick(noise_rng, s) for s in NOISE_SLOTS}
            resample = {s: (noise_rng.random(), pick(noise_rng, s)) for s in NOISE_SLOTS}

            ref_key = tuple(dom[s] for s in DOMINANT_SLOTS)
            tgt_dom = {**dom, **new_values}
            tgt_key = tuple(tgt_dom[s] for s in DOMINANT_SLOTS)
            if tgt_key in by_dominant:
                continue
            ref = by_dominant.get(ref_key) or AttributeImage(**dom, **ref_noise)
            tgt_noise = {
                s: (draw if u < noise_level else getattr(ref, s))
                for s, (u, draw) in resample.items()
            }
            tgt = AttributeImage(**tgt_dom, **tgt_noise)
            text = " and ".join(_edit_text(s, dom[s], new_values[s]) for s in edited)
            by_dominant[ref_key] = ref
            by_dominant[tgt_key] = tgt
            for img in (ref, tgt):
                image_index[img.image_id] = img.to_record()
                gallery.setdefault(img.image_id)
            triplets.append(QueryTriplet(
                query_id=f"syn-{qid:05d}", ref_image_id=ref.image_id, mod_text=text,
                target_image_id=tgt.image_id, split=split,
            ))
            qid += 1
            made += 1
        galleries[split] = list(gallery)
    return DatasetManifest(name=name, image_index=image_index, triplets=triplets,
                           gallery_ids=galleries, kind="synthetic")


_PALETTE = {
    "red": (220, 40, 40), "blue": (40, 70, 220), "green": (40, 170, 60), "yellow": (235, 215, 40),
    "black": (20, 20, 20), "white": (245, 245, 245), "purple": (140, 50, 170), "orange": (245, 140, 30),
}
_BACKDROPS = {
    "tree": (70, 110, 60), "beach": (230, 210, 160), "street": (110, 110, 115),
    "studio": (200, 200, 205), "snow": (235, 240, 250), "forest": (30, 70, 40),
}


def render(image: AttributeImage, size: int = 64):
    """Deterministic bitmap of an attribute image (zeroed slots render as black)."""
    from PIL import Image, ImageDraw

    canvas = Image.new("RGB", (size, size), _BACKDROPS.get(image.background, (0, 0, 0)))
    draw = ImageDraw.Draw(canvas)
    if image.clutter is not None:
        rng = np.random.default_rng(VOCAB["clutter"].index(image.clutter))
        for x, y in rng.integers(0, size, size=(12, 2)):
            draw.rectangle([int(x), int(y), int(x) + 2, int(y) + 2], fill=(90, 60, 30))
    if image.object_class is not None:
        fill = _PALETTE.get(image.color, (128, 128, 128))
        k = VOCAB["object_class"].index(image.object_class)
        box = [size // 4, size // 4, 3 * size // 4, 3 * size // 4]
        if k % 3 == 0:
            draw.ellipse(box, fill=fill)
        elif k % 3 == 1:
            draw.rectangle(box, fill=fill)
        else:
            draw.polygon([(size // 2, size // 4), (size // 4, 3 * size // 4), (3 * size // 4, 3 * size // 4)], fill=fill)
        if image.pattern not in (None, "plain"):
            step = 3 + VOCAB["pattern"].index(image.pattern)
            for offset in range(box[0], box[2], step):
                draw.line([offset, box[1], offset, box[3]], fill=(255 - fill[0], 255 - fill[1], 255 - fill[2]))
    return canvas
