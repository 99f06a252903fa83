"""Caption-guided dominant segmentation with a content-addressed on-disk cache.

Layout::

    <root>/index.json               image_id -> content hash
    <root>/records/<hash>/caption.txt
    <root>/records/<hash>/segmented.json | segmented.png
    <root>/records/<hash>/meta.json     sha256 of every payload file

``meta.json`` is written last; a record whose payload hashes disagree with it
is treated as absent and recomputed.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import shutil
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from filelock import FileLock

from .data import DatasetManifest, canonical_json
from .synthetic import AttributeImage

log = logging.getLogger(__name__)


class PreprocessMissing(LookupError):
    """Raised when a segmentation record is needed but was never computed."""

    def __init__(self, image_ids):
        self.image_ids = sorted(set(image_ids))
        super().__init__(
            f"no segmentation record for {len(self.image_ids)} image(s) "
            f"(e.g. {self.image_ids[:3]}); run `focuscir preprocess` first"
        )


@dataclass
class SegmentationRecord:
    image_id: str
    caption: str
    segmented_image: Any
    content_hash: str


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    failures: int = 0
    failed: dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"hits": self.hits, "misses": self.misses, "failures": self.failures,
                "failed": dict(sorted(self.failed.items()))}


def load_source(entry: Any):
    """Image object for a manifest ``image_index`` entry."""
    if isinstance(entry, dict):
        return AttributeImage.from_record(entry)
    from PIL import Image

    with Image.open(entry) as img:
        return img.convert("RGB")


def source_hash(entry: Any) -> str:
    if isinstance(entry, dict):
        return hashlib.sha256(canonical_json(AttributeImage.from_record(entry).to_record())).hexdigest()
    return hashlib.sha256(Path(entry).read_bytes()).hexdigest()


def _encode_segmented(image: Any) -> tuple[str, bytes]:
    if isinstance(image, AttributeImage):
        return "segmented.json", canonical_json(image.to_record())
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return "segmented.png", buf.getvalue()


def _decode_segmented(name: str, payload: bytes) -> Any:
    if name.endswith(".json"):
        return AttributeImage.from_record(json.loads(payload))
    from PIL import Image

    return Image.open(io.BytesIO(payload)).convert("RGB")


def _sha(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class SegmentationCache:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        (self.root / "records").mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._index: dict[str, str] = self._read_index()

    @property
    def index_path(self) -> Path:
        return self.root / "index.json"

    def _read_index(self) -> dict[str, str]:
        if not self.index_path.exists():
            return {}
        try:
            return json.loads(self.index_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            log.warning("unreadable cache index %s; rebuilding", self.index_path)
            return {}

    def _record_dir(self, digest: str) -> Path:
        return self.root / "records" / digest

    def lookup(self, content_hash: str) -> tuple[str, Any] | None:
        """(caption, segmented image) for a content hash, or None if absent or corrupt."""
        d = self._record_dir(content_hash)
        try:
            meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
            if meta.get("content_hash") != content_hash:
                return None
            payloads = {}
            for name, digest in meta["files"].items():
                payload = (d / name).read_bytes()
                if _sha(payload) != digest:
                    return None
                payloads[name] = payload
            seg_name = next(n for n in payloads if n.startswith("segmented."))
            return payloads["caption.txt"].decode("utf-8"), _decode_segmented(seg_name, payloads[seg_name])
        except (OSError, ValueError, KeyError, StopIteration):
            return None

    def get(self, image_id: str) -> SegmentationRecord | None:
        digest = self._index.get(image_id)
        if digest is None:
            return None
        found = self.lookup(digest)
        if found is None:
            return None
        return SegmentationRecord(image_id, found[0], found[1], digest)

    def store(self, record: SegmentationRecord) -> None:
        seg_name, seg_bytes = _encode_segmented(record.segmented_image)
        cap_bytes = record.caption.encode("utf-8")
        meta = {"content_hash": record.content_hash,
                "files": {"caption.txt": _sha(cap_bytes), seg_name: _sha(seg_bytes)}}
        final = self._record_dir(record.content_hash)
        tmp = self.root / "records" / f".tmp-{uuid.uuid4().hex}"
        tmp.mkdir()
        (tmp / "caption.txt").write_bytes(cap_bytes)
        (tmp / seg_name).write_bytes(seg_bytes)
        (tmp / "meta.json").write_bytes(canonical_json(meta))
        if final.exists():
            trash = self.root / "records" / f".trash-{uuid.uuid4().hex}"
            try:
                os.replace(final, trash)
            except OSError:
                trash = None
            if trash is not None:
                shutil.rmtree(trash, ignore_errors=True)
        try:
            os.replace(tmp, final)
        except OSError:
            # Another writer landed the same content-addressed record first.
            shutil.rmtree(tmp, ignore_errors=True)
        with self._lock:
            self._index[record.image_id] = record.content_hash

    def flush_index(self) -> None:
        """Merge the in-memory index into ``index.json`` under a cross-process lock."""
        with FileLock(str(self.root / ".index.lock")):
            merged = self._read_index()
            with self._lock:
                merged.update(self._index)
                self._index = merged
            tmp = self.root / f".index.{uuid.uuid4().hex}.tmp"
            tmp.write_text(json.dumps(dict(sorted(merged.items())), indent=1), encoding="utf-8")
            os.replace(tmp, self.index_path)

    def require(self, image_id: str) -> SegmentationRecord:
        rec = self.get(image_id)
        if rec is None:
            raise PreprocessMissing([image_id])
        return rec


def segment_dominant(image_id: str, manifest: DatasetManifest, captioner, segmenter,
                     cache: SegmentationCache) -> tuple[SegmentationRecord, bool]:
    """Record for ``image_id`` and whether it came from the cache."""
    entry = manifest.image_index[image_id]
    digest = source_hash(entry)
    found = cache.lookup(digest)
    if found is not None:
        record = SegmentationRecord(image_id, found[0], found[1], digest)
        with cache._lock:
            cache._index[image_id] = digest
        return record, True
    image = load_source(entry)
    caption = captioner(image)
    segmented = segmenter(image, caption)
    record = SegmentationRecord(image_id, caption, segmented, digest)
    cache.store(record)
    return record, False


def preprocess_manifest(manifest: DatasetManifest, cache: SegmentationCache, captioner, segmenter,
                        workers: int = 1) -> CacheStats:
    stats = CacheStats()
    ids = manifest.image_ids()

    def task(image_id):
        try:
            _, hit = segment_dominant(image_id, manifest, captioner, segmenter, cache)
            return image_id, hit, None
        except Exception as exc:  # per-image failure must not stop the batch
            return image_id, False, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, ids))
    else:
        results = [task(i) for i in ids]
    for image_id, hit, error in results:
        if error is not None:
            stats.failures += 1
            stats.failed[image_id] = error
        elif hit:
            stats.hits += 1
        else:
            stats.misses += 1
    if ids:
        cache.flush_index()
    if stats.failures:
        log.warning("preprocessing failed for %d image(s): %s", stats.failures, sorted(stats.failed))
    return stats
