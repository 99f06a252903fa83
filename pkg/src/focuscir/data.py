"""Domain types, hyper-parameter configuration and dataset manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import torch

SPLITS = ("train", "val", "test")

ABLATION_FLAGS = (
    "no_FM",
    "no_VFM",
    "no_TFM",
    "no_MGFP",
    "no_target_VFM",
    "no_target_MGFP",
    "no_revision",
    "no_BBC",
    "no_FR",
)


class ManifestError(Exception):
    """Raised for unreadable or inconsistent dataset sources."""


class ParseError(ManifestError):
    def __init__(self, source: str | os.PathLike, line: int, message: str):
        self.source = str(source)
        self.line = line
        super().__init__(f"{source}:{line}: {message}")


class IngestError(ManifestError):
    def __init__(self, missing: Sequence[str]):
        self.missing = sorted(missing)
        shown = ", ".join(self.missing[:20])
        more = f" (+{len(self.missing) - 20} more)" if len(self.missing) > 20 else ""
        super().__init__(f"missing image files for ids: {shown}{more}")


class ConfigError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration: " + "; ".join(self.violations))


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Triplets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryTriplet:
    query_id: str
    ref_image_id: str
    mod_text: str
    target_image_id: str
    split: str
    subset_ids: tuple[str, ...] | None = None
    category: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.ref_image_id == self.target_image_id:
            raise ValueError(f"{self.query_id}: reference and target image are identical")
        if not self.mod_text.strip():
            raise ValueError(f"{self.query_id}: empty modification text")
        if self.subset_ids is not None:
            object.__setattr__(self, "subset_ids", tuple(self.subset_ids))
            if self.target_image_id not in self.subset_ids:
                raise ValueError(f"{self.query_id}: target not in subset_ids")

    def to_record(self) -> dict:
        rec: dict[str, Any] = {
            "query_id": self.query_id,
            "ref_image_id": self.ref_image_id,
            "mod_text": self.mod_text,
            "target_image_id": self.target_image_id,
            "split": self.split,
        }
        if self.subset_ids is not None:
            rec["subset_ids"] = list(self.subset_ids)
        if self.category is not None:
            rec["category"] = self.category
        return rec

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "QueryTriplet":
        subset = rec.get("subset_ids")
        return cls(
            query_id=str(rec["query_id"]),
            ref_image_id=str(rec["ref_image_id"]),
            mod_text=str(rec["mod_text"]),
            target_image_id=str(rec["target_image_id"]),
            split=str(rec["split"]),
            subset_ids=tuple(subset) if subset is not None else None,
            category=rec.get("category"),
        )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_PROFILE_DEFAULTS: dict[str, dict[str, Any]] = {
    "full": dict(
        D=1024, D_I=1280, C=257, S=77, D_T=1024, P=4, B=16, dtype="float32",
    ),
    "stub": dict(
        D=16, D_I=32, C=5, S=8, D_T=24, P=2, B=4, dtype="float64",
    ),
}


@dataclass
class HyperConfig:
    profile: str = "stub"
    D: int = 16
    D_I: int = 32
    C: int = 5
    S: int = 8
    D_T: int = 24
    P: int = 2
    tau: float = 0.1
    mu: float = 0.5
    B: int = 4
    lr_head: float = 1e-4
    lr_backbone: float = 1e-6
    epochs: int = 10
    ablation_flags: frozenset[str] = frozenset()
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 0.0
    detach_target_dist: bool = False
    train_backbone: bool = True
    dtype: str = "float64"
    image_backbone: str = "laion/CLIP-ViT-H-14-laion2B-s32B-b79K"
    captioner_backbone: str = "Salesforce/blip2-opt-2.7b"
    segmenter_backbone: str = "CIDAS/clipseg-rd64-refined"
    backbone_seed: int = 1234

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "HyperConfig":
        if profile not in _PROFILE_DEFAULTS:
            raise ConfigError([f"profile must be one of {sorted(_PROFILE_DEFAULTS)}"])
        values = dict(_PROFILE_DEFAULTS[profile])
        values.update(overrides)
        values["profile"] = profile
        return cls(**values)

    @property
    def flags(self) -> frozenset[str]:
        return frozenset(self.ablation_flags)

    def has(self, flag: str) -> bool:
        return flag in self.ablation_flags

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def replace(self, **changes) -> "HyperConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ablation_flags"] = sorted(self.ablation_flags)
        return out


def validate_config(cfg: HyperConfig) -> HyperConfig:
    problems = []
    for name in ("D", "D_I", "C", "S", "D_T", "B", "epochs"):
        value = getattr(cfg, name)
        if name == "epochs":
            if not isinstance(value, int) or value < 0:
                problems.append("epochs ≥ 0")
        elif not isinstance(value, int) or value <= 0:
            problems.append(f"{name} > 0")
    if not isinstance(cfg.P, int) or cfg.P < 1:
        problems.append("P ≥ 1")
    if not cfg.tau > 0:
        problems.append("tau > 0")
    if not cfg.mu >= 0:
        problems.append("mu ≥ 0")
    if cfg.lr_head < 0 or cfg.lr_backbone < 0:
        problems.append("learning rates ≥ 0")
    if cfg.profile not in _PROFILE_DEFAULTS:
        problems.append(f"profile ∈ {sorted(_PROFILE_DEFAULTS)}")
    unknown = set(cfg.ablation_flags) - set(ABLATION_FLAGS)
    if unknown:
        problems.append(f"unknown ablation flags {sorted(unknown)}")
    if {"no_BBC", "no_FR"} <= set(cfg.ablation_flags):
        problems.append("no_BBC and no_FR together leave an empty objective")
    if cfg.dtype not in ("float32", "float64"):
        problems.append("dtype ∈ {float32, float64}")
    if problems:
        raise ConfigError(problems)
    return cfg


def _coerce(field_type: Any, raw: str) -> Any:
    kind = field_type if isinstance(field_type, str) else getattr(field_type, "__name__", str(field_type))
    if "frozenset" in kind:
        items = [s.strip() for s in raw.replace(";", ",").split(",")]
        return frozenset(s for s in items if s)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


def apply_overrides(cfg: HyperConfig, pairs: Mapping[str, str]) -> HyperConfig:
    fields = {f.name: f.type for f in dataclasses.fields(HyperConfig)}
    changes = {}
    for key, raw in pairs.items():
        if key == "profile":
            continue
        if key not in fields:
            raise ConfigError([f"unknown config key {key!r}"])
        try:
            changes[key] = _coerce(fields[key], raw)
        except ValueError as exc:
            raise ConfigError([f"{key}: {exc}"]) from exc
    return cfg.replace(**changes)


def parse_key_values(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ParseError(source, lineno, f"expected key=value, got {text!r}")
        key, value = text.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, str] | None = None,
                profile: str | None = None) -> HyperConfig:
    """Build a config from profile defaults, then the file, then overrides."""
    pairs: dict[str, str] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            pairs.update(parse_key_values(fh, str(path)))
    pairs.update(overrides or {})
    chosen = profile or pairs.get("profile", "stub")
    cfg = HyperConfig.for_profile(chosen)
    cfg = apply_overrides(cfg, pairs)
    return validate_config(cfg)


def dump_config(cfg: HyperConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Feature matrices
# ---------------------------------------------------------------------------

ROLES = (
    "local_visual", "local_text", "text_tokens", "global_stack", "attended",
    "fused_local", "weighted_local", "weighted_global", "focused", "reduced",
    "composed", "pooled",
)


def role_shape(role: str, cfg: HyperConfig) -> tuple[int | None, int | None]:
    """Expected (rows, cols) for a role; None means unconstrained."""
    table = {
        "local_visual": (cfg.C, cfg.D_I),
        "local_text": (cfg.S, cfg.D),
        "text_tokens": (cfg.S, cfg.D_T),
        "global_stack": (3, cfg.D),
        "fused_local": (cfg.C, cfg.D),
        "weighted_local": (cfg.P, cfg.D),
        "weighted_global": (cfg.P, cfg.D),
        "focused": (2 * cfg.P, cfg.D),
        "reduced": (cfg.P, cfg.D),
        "composed": (cfg.P, cfg.D),
        "pooled": (1, cfg.D),
        "attended": (None, None),
    }
    if role not in table:
        raise ShapeError(f"unknown role {role!r}")
    return table[role]


@dataclass(frozen=True)
class FeatureMatrix:
    """A (rows, cols) matrix tagged with its role; leading batch dims are allowed."""

    data: torch.Tensor
    role: str
    cfg: HyperConfig | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.data.dim() < 2:
            raise ShapeError(f"{self.role}: expected a matrix, got shape {tuple(self.data.shape)}")
        if self.role not in ROLES:
            raise ShapeError(f"unknown role {self.role!r}")
        if self.cfg is not None:
            rows, cols = role_shape(self.role, self.cfg)
            got = tuple(self.data.shape[-2:])
            if (rows is not None and got[0] != rows) or (cols is not None and got[1] != cols):
                raise ShapeError(f"{self.role}: expected ({rows}, {cols}), got {got}")
        if not bool(torch.isfinite(self.data).all()):
            raise ShapeError(f"{self.role}: non-finite entries")

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    name: str
    image_index: dict[str, Any]
    triplets: list[QueryTriplet]
    gallery_ids: dict[str, list[str]]
    kind: str = "synthetic"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        missing = set()
        for t in self.triplets:
            for iid in (t.ref_image_id, t.target_image_id, *(t.subset_ids or ())):
                if iid not in self.image_index:
                    missing.add(iid)
        for ids in self.gallery_ids.values():
            missing.update(i for i in ids if i not in self.image_index)
        if missing:
            raise ManifestError(f"image ids not in image_index: {sorted(missing)[:20]}")
        for split in SPLITS:
            targets = {t.target_image_id for t in self.triplets if t.split == split}
            gallery = set(self.gallery_ids.get(split, ()))
            if targets - gallery:
                raise ManifestError(f"{split} gallery lacks targets {sorted(targets - gallery)[:10]}")

    def split(self, name: str) -> list[QueryTriplet]:
        return [t for t in self.triplets if t.split == name]

    def gallery(self, split: str, category: str | None = None) -> list[str]:
        if category is not None and f"{split}/{category}" in self.gallery_ids:
            return self.gallery_ids[f"{split}/{category}"]
        return self.gallery_ids.get(split, [])

    def image_ids(self) -> list[str]:
        """Every image referenced by a triplet, in first-seen order."""
        seen: dict[str, None] = {}
        for t in self.triplets:
            seen.setdefault(t.ref_image_id)
            seen.setdefault(t.target_image_id)
        for ids in self.gallery_ids.values():
            for i in ids:
                seen.setdefault(i)
        return list(seen)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (
            self.name == other.name
            and self.kind == other.kind
            and self.image_index == other.image_index
            and self.triplets == other.triplets
            and {k: list(v) for k, v in self.gallery_ids.items()}
            == {k: list(v) for k, v in other.gallery_ids.items()}
        )


def content_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def write_manifest(manifest: DatasetManifest, directory: str | os.PathLike) -> Path:
    """Write the normalized layout: ``manifest.json`` plus one jsonl file per split."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    header = {
        "name": manifest.name,
        "kind": manifest.kind,
        "image_index": {k: manifest.image_index[k] for k in sorted(manifest.image_index)},
        "gallery_ids": manifest.gallery_ids,
    }
    _atomic_write(root / "manifest.json", json.dumps(header, ensure_ascii=False, indent=1).encode("utf-8"))
    for split in SPLITS:
        lines = [json.dumps(t.to_record(), ensure_ascii=False) for t in manifest.split(split)]
        body = "".join(line + "\n" for line in lines)
        _atomic_write(root / f"{split}.jsonl", body.encode("utf-8"))
    return root


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _read_normalized(root: Path) -> DatasetManifest:
    header_path = root / "manifest.json"
    if not header_path.exists():
        raise ManifestError(f"{header_path} not found")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(header_path, exc.lineno, exc.msg) from exc
    triplets = []
    for split in SPLITS:
        path = root / f"{split}.jsonl"
        if not path.exists():
            continue
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    triplets.append(QueryTriplet.from_record(json.loads(line)))
                except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                    raise ParseError(path, lineno, str(exc)) from exc
    return DatasetManifest(
        name=header["name"],
        image_index=header["image_index"],
        triplets=triplets,
        gallery_ids={k: list(v) for k, v in header["gallery_ids"].items()},
        kind=header.get("kind", "synthetic"),
    )


def load_manifest(path: str | os.PathLike, format: str) -> DatasetManifest:
    root = Path(path)
    if not root.exists():
        raise ManifestError(f"{root} does not exist")
    if format in ("synthetic", "normalized"):
        return _read_normalized(root)
    from . import ingest

    readers = {"fashioniq": ingest.read_fashioniq, "shoes": ingest.read_shoes, "cirr": ingest.read_cirr}
    if format not in readers:
        raise ManifestError(f"unknown manifest format {format!r}")
    return readers[format](root)
