"""Readers for the raw FashionIQ, Shoes and CIRR release layouts."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .data import DatasetManifest, IngestError, ParseError, QueryTriplet

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".webp")

# FashionIQ ships "val" captions for its public evaluation split.
_FIQ_SPLITS = {"train": "train", "val": "val", "test": "test"}


def join_captions(captions: list[str]) -> str:
    parts = [c.strip().rstrip(".") for c in captions if c and c.strip()]
    return " and ".join(parts)


def _load_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from exc


def _record_line(path: Path, index: int) -> int:
    """Line on which the ``index``-th top-level record of a JSON array starts."""
    text = path.read_text(encoding="utf-8")
    decoder = json.JSONDecoder()
    pos = text.index("[") + 1
    for i in range(index + 1):
        while text[pos] in " \t\r\n,":
            pos += 1
        if i == index:
            return text.count("\n", 0, pos) + 1
        _, pos = decoder.raw_decode(text, pos)
    return 1


def _find_image(images_dir: Path, image_id: str) -> Path | None:
    direct = images_dir / image_id
    if direct.suffix.lower() in IMAGE_EXTENSIONS and direct.exists():
        return direct
    for ext in IMAGE_EXTENSIONS:
        candidate = images_dir / f"{image_id}{ext}"
        if candidate.exists():
            return candidate
    return None


def _resolve_all(images_dir: Path, ids: set[str]) -> dict[str, str]:
    index, missing = {}, []
    for image_id in sorted(ids):
        found = _find_image(images_dir, image_id)
        if found is None:
            missing.append(image_id)
        else:
            index[image_id] = str(found)
    if missing:
        raise IngestError(missing)
    return index


def read_fashioniq(root: Path) -> DatasetManifest:
    """``captions/cap.<category>.<split>.json``, ``image_splits/split.<category>.<split>.json``, ``images/``."""
    cap_dir = root / "captions"
    files = sorted(cap_dir.glob("cap.*.*.json"))
    if not files:
        raise ParseError(cap_dir, 0, "no cap.<category>.<split>.json files")
    triplets: list[QueryTriplet] = []
    galleries: dict[str, set[str]] = {}
    for path in files:
        _, category, split, _ = path.name.split(".")
        split = _FIQ_SPLITS.get(split, split)
        records = _load_json(path)
        for i, rec in enumerate(records):
            try:
                if "target" not in rec:
                    continue
                triplets.append(QueryTriplet(
                    query_id=f"{category}-{split}-{i}",
                    ref_image_id=str(rec["candidate"]),
                    mod_text=join_captions(rec["captions"]),
                    target_image_id=str(rec["target"]),
                    split=split,
                    category=category,
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, _record_line(path, i), f"bad record: {exc}") from exc
        split_file = root / "image_splits" / f"split.{category}.{path.name.split('.')[2]}.json"
        members = set(_load_json(split_file)) if split_file.exists() else set()
        members |= {t.target_image_id for t in triplets if t.split == split and t.category == category}
        galleries.setdefault(f"{split}/{category}", set()).update(members)
        galleries.setdefault(split, set()).update(members)
    ids = {i for t in triplets for i in (t.ref_image_id, t.target_image_id)}
    ids |= {i for g in galleries.values() for i in g}
    index = _resolve_all(root / "images", ids)
    return DatasetManifest(
        name="fashioniq", image_index=index, triplets=triplets,
        gallery_ids={k: sorted(v) for k, v in sorted(galleries.items())}, kind="fashioniq",
    )


def read_shoes(root: Path) -> DatasetManifest:
    """``relative_captions_shoes.json``, ``train_im_names.txt``, ``eval_im_names.txt``, ``images/``."""
    cap_path = root / "relative_captions_shoes.json"
    records = _load_json(cap_path)
    train_names = set((root / "train_im_names.txt").read_text(encoding="utf-8").split())
    eval_path = root / "eval_im_names.txt"
    eval_names = set(eval_path.read_text(encoding="utf-8").split()) if eval_path.exists() else set()
    triplets = []
    for i, rec in enumerate(records):
        try:
            ref, tgt = str(rec["ReferenceImageName"]), str(rec["ImageName"])
            split = "train" if ref in train_names else "test"
            triplets.append(QueryTriplet(
                query_id=f"shoes-{i}", ref_image_id=ref, mod_text=str(rec["RelativeCaption"]).strip(),
                target_image_id=tgt, split=split,
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(cap_path, _record_line(cap_path, i), f"bad record: {exc}") from exc
    galleries = {
        "train": set(train_names) | {t.target_image_id for t in triplets if t.split == "train"},
        "test": set(eval_names) | {t.target_image_id for t in triplets if t.split == "test"},
    }
    ids = {i for t in triplets for i in (t.ref_image_id, t.target_image_id)} | galleries["train"] | galleries["test"]
    index = _resolve_all(root / "images", ids)
    return DatasetManifest(
        name="shoes", image_index=index, triplets=triplets,
        gallery_ids={k: sorted(v) for k, v in galleries.items()}, kind="shoes",
    )


def read_cirr(root: Path) -> DatasetManifest:
    """``captions/cap.rc2.<split>.json`` and ``image_splits/split.rc2.<split>.json`` (name → relative path)."""
    triplets = []
    galleries: dict[str, set[str]] = {}
    index: dict[str, str] = {}
    missing = []
    for raw_split, split in (("train", "train"), ("val", "val"), ("test1", "test")):
        cap_path = root / "captions" / f"cap.rc2.{raw_split}.json"
        if not cap_path.exists():
            continue
        split_path = root / "image_splits" / f"split.rc2.{raw_split}.json"
        name_to_path = _load_json(split_path) if split_path.exists() else {}
        for name, rel in name_to_path.items():
            full = root / rel
            if full.exists():
                index[name] = str(full)
            else:
                missing.append(name)
        galleries[split] = set(name_to_path)
        for i, rec in enumerate(_load_json(cap_path)):
            try:
                if "target_hard" not in rec:
                    continue
                members = rec.get("img_set", {}).get("members")
                triplets.append(QueryTriplet(
                    query_id=str(rec["pairid"]), ref_image_id=str(rec["reference"]),
                    mod_text=str(rec["caption"]).strip(), target_image_id=str(rec["target_hard"]),
                    split=split, subset_ids=tuple(members) if members is not None else None,
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(cap_path, _record_line(cap_path, i), f"bad record: {exc}") from exc
        galleries[split] |= {t.target_image_id for t in triplets if t.split == split}
    referenced = {i for t in triplets for i in (t.ref_image_id, t.target_image_id, *(t.subset_ids or ()))}
    missing.extend(i for i in referenced if i not in index and i not in missing)
    if missing:
        raise IngestError(missing)
    return DatasetManifest(
        name="cirr", image_index=index, triplets=triplets,
        gallery_ids={k: sorted(v) for k, v in galleries.items()}, kind="cirr",
    )
