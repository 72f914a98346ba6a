"""Directory-backed model catalog with BLOB, decoupled and API storage.

On-disk layout under the catalog root::

    catalog.idx              header line, then one JSON record per line (append-only)
    blobs/<id>.bin           whole-model payloads
    layers/<id>/<index>.mvec weight frame followed by an optional bias frame
    bases/<name>.desc        architecture descriptors (ordered layer names and shapes)

Checksums are SHA-256 over the payload bytes; for decoupled models the layer
files are hashed in layer-index order.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence
from urllib.parse import urlparse

from filelock import FileLock

from taskdb.backends.cost import ModelProfile
from taskdb.errors import (
    ChecksumMismatch,
    CorruptFrame,
    DuplicateNameVersion,
    EmptyPayload,
    MalformedEndpoint,
    MissingLayer,
    NonContiguousLayers,
    NotDecoupled,
    ShapeMismatch,
    UnknownBaseModel,
    UnknownLayer,
    UnknownModel,
)
from taskdb.tensor import Mvec, mvec_serialize, read_frames

CATALOG_HEADER = "TASKDB-CATALOG 1 digest=sha256"


class StorageKind(str, enum.Enum):
    BLOB = "Blob"
    DECOUPLED = "Decoupled"
    API = "Api"


@dataclass(frozen=True)
class ApiModelSpec:
    endpoint: str
    input_schema: str = "mvec"
    output_schema: str = "mvec"
    expected_latency: float = 0.0
    auth_ref: str | None = None
    quota: int = 1000
    timeout: float = 5.0
    max_retries: int = 3
    quota_window: float = 60.0
    cache_ttl: float = 300.0

    def __post_init__(self):
        if self.expected_latency < 0:
            raise ValueError("expected_latency must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.quota < 0:
            raise ValueError("quota must be >= 0")


@dataclass(frozen=True)
class LayerRecord:
    model_id: int | None
    layer_name: str
    layer_index: int
    weight: Mvec
    bias: Mvec | None = None

    def payload(self) -> bytes:
        data = mvec_serialize(self.weight)
        if self.bias is not None:
            data += mvec_serialize(self.bias)
        return data


@dataclass(frozen=True)
class BaseLayer:
    name: str
    weight_shape: tuple
    bias_shape: tuple | None = None


@dataclass(frozen=True)
class BaseModel:
    """Architecture template: ordered layer names with their expected shapes."""

    name: str
    layers: tuple

    def to_json(self) -> dict:
        return {"name": self.name,
                "layers": [{"name": l.name, "weight_shape": list(l.weight_shape),
                            "bias_shape": None if l.bias_shape is None else list(l.bias_shape)}
                           for l in self.layers]}

    @classmethod
    def from_json(cls, obj: dict) -> "BaseModel":
        return cls(obj["name"], tuple(
            BaseLayer(l["name"], tuple(l["weight_shape"]),
                      None if l["bias_shape"] is None else tuple(l["bias_shape"]))
            for l in obj["layers"]))

    @classmethod
    def of_layers(cls, name: str, layers: Sequence[LayerRecord]) -> "BaseModel":
        ordered = sorted(layers, key=lambda l: l.layer_index)
        return cls(name, tuple(BaseLayer(l.layer_name, l.weight.shape, None if l.bias is None else l.bias.shape)
                               for l in ordered))


@dataclass(frozen=True)
class ModelRecord:
    model_id: int
    name: str
    version: str
    storage_kind: StorageKind
    checksum: str
    profile: ModelProfile
    created_at: float
    base_model: str | None = None
    layer_names: tuple = ()
    api: ApiModelSpec | None = None


@dataclass
class AssembledModel:
    record: ModelRecord
    layers: list = field(default_factory=list)
    payload: bytes | None = None
    architecture: dict | None = None
    api: ApiModelSpec | None = None


# -- blob container ----------------------------------------------------------
# A whole-model payload: architecture JSON plus every layer's frames.
_BLOB_MAGIC = b"MBLB"
_BLOB_HEAD = struct.Struct("<4sBQ")
_U64 = struct.Struct("<Q")


def pack_blob(architecture: dict, layers: Sequence[LayerRecord]) -> bytes:
    arch = json.dumps(architecture, sort_keys=True).encode()
    parts = [_BLOB_HEAD.pack(_BLOB_MAGIC, 1, len(arch)), arch, _U64.pack(len(layers))]
    for layer in sorted(layers, key=lambda l: l.layer_index):
        name = layer.layer_name.encode()
        body = layer.payload()
        parts += [_U64.pack(len(name)), name, _U64.pack(len(body)), body]
    return b"".join(parts)


def unpack_blob(payload: bytes) -> tuple[dict, list[LayerRecord]]:
    view = memoryview(payload)
    try:
        magic, version, alen = _BLOB_HEAD.unpack_from(view, 0)
        if magic != _BLOB_MAGIC or version != 1:
            raise CorruptFrame("not a model blob container")
        pos = _BLOB_HEAD.size
        arch = json.loads(bytes(view[pos:pos + alen]))
        pos += alen
        (count,) = _U64.unpack_from(view, pos)
        pos += _U64.size
        layers = []
        for index in range(count):
            (nlen,) = _U64.unpack_from(view, pos)
            pos += _U64.size
            name = bytes(view[pos:pos + nlen]).decode()
            pos += nlen
            (blen,) = _U64.unpack_from(view, pos)
            pos += _U64.size
            frames = read_frames(bytes(view[pos:pos + blen]))
            pos += blen
            layers.append(LayerRecord(None, name, index, frames[0], frames[1] if len(frames) > 1 else None))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptFrame(f"malformed model blob: {exc}") from exc
    if pos != len(view):
        raise CorruptFrame("trailing bytes after model blob")
    return arch, layers


# -- locking -----------------------------------------------------------------

class _RWLock:
    """Many concurrent readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


def _digest(chunks: Iterable[bytes]) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _profile_json(p: ModelProfile) -> dict:
    return asdict(p)


class ModelRepo:
    """Single-writer, multi-reader model catalog rooted at a directory."""

    def __init__(self, root: str | os.PathLike, clock=time.time):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self._lock = _RWLock()
        self._file_lock = FileLock(str(self.root / ".catalog.lock"))
        self._records: dict[int, ModelRecord] = {}
        self._bases: dict[str, BaseModel] = {}
        self._line_bytes: dict[int, int] = {}
        self._index = self.root / "catalog.idx"
        if not self._index.exists():
            self._index.write_text(CATALOG_HEADER + "\n")
        self._replay()

    # -- catalog index -------------------------------------------------------

    def _replay(self) -> None:
        lines = self._index.read_text().splitlines()
        if not lines or lines[0] != CATALOG_HEADER:
            raise CorruptFrame(f"{self._index}: unrecognised catalog header")
        records, bases, sizes = {}, {}, {}
        for line in lines[1:]:
            if not line.strip():
                continue
            entry = json.loads(line)
            op = entry.pop("op")
            if op == "base":
                bases[entry["name"]] = BaseModel.from_json(entry)
            elif op == "model":
                rec = self._record_from_json(entry)
                records[rec.model_id] = rec
                sizes[rec.model_id] = len(line.encode()) + 1
            elif op == "checksum":
                rec = records[entry["model_id"]]
                records[rec.model_id] = replace(rec, checksum=entry["checksum"])
                sizes[rec.model_id] += len(line.encode()) + 1
        self._records, self._bases, self._line_bytes = records, bases, sizes

    @staticmethod
    def _record_from_json(e: dict) -> ModelRecord:
        return ModelRecord(
            model_id=e["model_id"], name=e["name"], version=e["version"],
            storage_kind=StorageKind(e["kind"]), checksum=e["checksum"],
            profile=ModelProfile(**e["profile"]), created_at=e["created_at"],
            base_model=e.get("base"), layer_names=tuple(e.get("layers", ())),
            api=ApiModelSpec(**e["api"]) if e.get("api") else None)

    @staticmethod
    def _record_to_json(r: ModelRecord) -> dict:
        out = {"op": "model", "model_id": r.model_id, "name": r.name, "version": r.version,
               "kind": r.storage_kind.value, "checksum": r.checksum, "profile": _profile_json(r.profile),
               "created_at": r.created_at}
        if r.base_model is not None:
            out["base"] = r.base_model
        if r.layer_names:
            out["layers"] = list(r.layer_names)
        if r.api is not None:
            out["api"] = asdict(r.api)
        return out

    def _append(self, entry: dict) -> int:
        line = json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n"
        with open(self._index, "a") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
        return len(line.encode())

    @contextmanager
    def _writing(self):
        with self._file_lock, self._lock.write():
            yield

    def _next_id(self) -> int:
        return max(self._records, default=0) + 1

    def _check_unique(self, name: str, version: str) -> None:
        for r in self._records.values():
            if r.name == name and r.version == version:
                raise DuplicateNameVersion(f"{name}:{version} is already registered as model {r.model_id}")

    def _commit(self, rec: ModelRecord) -> int:
        self._line_bytes[rec.model_id] = self._append(self._record_to_json(rec))
        self._records[rec.model_id] = rec
        return rec.model_id

    # -- paths ---------------------------------------------------------------

    def blob_path(self, model_id: int) -> Path:
        return self.root / "blobs" / f"{model_id}.bin"

    def layer_path(self, model_id: int, index: int) -> Path:
        return self.root / "layers" / str(model_id) / f"{index}.mvec"

    def base_path(self, name: str) -> Path:
        return self.root / "bases" / f"{name}.desc"

    # -- registration --------------------------------------------------------

    def register_base(self, base: BaseModel) -> None:
        with self._writing():
            if base.name in self._bases:
                if self._bases[base.name] != base:
                    raise DuplicateNameVersion(f"base model {base.name!r} already registered with another layout")
                return
            _atomic_write(self.base_path(base.name), (json.dumps(base.to_json(), sort_keys=True) + "\n").encode())
            self._append({"op": "base", **base.to_json()})
            self._bases[base.name] = base

    def base(self, name: str) -> BaseModel:
        try:
            return self._bases[name]
        except KeyError:
            raise UnknownBaseModel(f"unknown base model {name!r}") from None

    def register_blob_model(self, name: str, version: str, payload: bytes,
                            profile: ModelProfile | None = None) -> int:
        if not payload:
            raise EmptyPayload("blob payload must be non-empty")
        payload = bytes(payload)
        profile = profile or ModelProfile(model_flops=0.0, model_size=float(len(payload)))
        with self._writing():
            self._check_unique(name, version)
            mid = self._next_id()
            _atomic_write(self.blob_path(mid), payload)
            rec = ModelRecord(mid, name, version, StorageKind.BLOB, _digest([payload]), profile, self.clock())
            return self._commit(rec)

    def register_decoupled_model(self, name: str, version: str, base_model: str,
                                 layers: Sequence[LayerRecord], profile: ModelProfile | None = None) -> int:
        base = self.base(base_model)
        ordered = sorted(layers, key=lambda l: l.layer_index)
        indices = [l.layer_index for l in ordered]
        if indices != list(range(len(ordered))):
            raise NonContiguousLayers(f"layer indices must be 0..{len(ordered) - 1}, got {indices}")
        if len(ordered) != len(base.layers):
            raise NonContiguousLayers(f"base {base_model!r} has {len(base.layers)} layers, got {len(ordered)}")
        for layer, spec in zip(ordered, base.layers):
            if layer.layer_name != spec.name:
                raise UnknownLayer(f"layer {layer.layer_index} is {layer.layer_name!r}, base expects {spec.name!r}")
            bias_shape = None if layer.bias is None else layer.bias.shape
            if layer.weight.shape != spec.weight_shape or bias_shape != spec.bias_shape:
                raise ShapeMismatch(f"layer {spec.name!r} shapes do not match base {base_model!r}")
        blobs = [l.payload() for l in ordered]
        profile = profile or ModelProfile(model_flops=0.0, model_size=float(sum(map(len, blobs))))
        with self._writing():
            self._check_unique(name, version)
            mid = self._next_id()
            for index, data in enumerate(blobs):
                _atomic_write(self.layer_path(mid, index), data)
            rec = ModelRecord(mid, name, version, StorageKind.DECOUPLED, _digest(blobs), profile, self.clock(),
                              base_model=base_model, layer_names=tuple(l.layer_name for l in ordered))
            return self._commit(rec)

    def register_api_model(self, name: str, version: str, spec: ApiModelSpec,
                           profile: ModelProfile | None = None) -> int:
        url = urlparse(spec.endpoint)
        if url.scheme not in ("http", "https") or not url.netloc:
            raise MalformedEndpoint(f"endpoint {spec.endpoint!r} is not an http(s) URL")
        profile = profile or ModelProfile(model_flops=0.0, model_size=0.0)
        with self._writing():
            self._check_unique(name, version)
            mid = self._next_id()
            digest = _digest([json.dumps(asdict(spec), sort_keys=True).encode()])
            rec = ModelRecord(mid, name, version, StorageKind.API, digest, profile, self.clock(), api=spec)
            return self._commit(rec)

    # -- lookup --------------------------------------------------------------

    def get(self, model_id: int) -> ModelRecord:
        try:
            return self._records[model_id]
        except KeyError:
            raise UnknownModel(f"unknown model id {model_id!r}") from None

    def find(self, name: str, version: str | None = None) -> ModelRecord:
        matches = [r for r in self._records.values() if r.name == name and version in (None, r.version)]
        if not matches:
            raise UnknownModel(f"no model named {name!r}" + (f" version {version!r}" if version else ""))
        return max(matches, key=lambda r: (r.version, r.model_id))

    def list_models(self, kind: StorageKind | str | None = None) -> list[ModelRecord]:
        kind = None if kind is None else StorageKind(kind)
        rows = [r for r in self._records.values() if kind is None or r.storage_kind is kind]
        return sorted(rows, key=lambda r: (r.name, r.version, r.model_id))

    def bases(self) -> list[BaseModel]:
        return [self._bases[n] for n in sorted(self._bases)]

    # -- payload access ------------------------------------------------------

    def _payload_chunks(self, rec: ModelRecord) -> list[bytes]:
        if rec.storage_kind is StorageKind.BLOB:
            return [self.blob_path(rec.model_id).read_bytes()]
        if rec.storage_kind is StorageKind.DECOUPLED:
            chunks = []
            for index in range(len(rec.layer_names)):
                p = self.layer_path(rec.model_id, index)
                if not p.exists():
                    raise MissingLayer(f"model {rec.model_id} is missing layer {index} ({p})")
                chunks.append(p.read_bytes())
            return chunks
        return [json.dumps(asdict(rec.api), sort_keys=True).encode()]

    def verify_checksum(self, model_id: int) -> bool:
        with self._lock.read():
            rec = self.get(model_id)
            try:
                return _digest(self._payload_chunks(rec)) == rec.checksum
            except MissingLayer:
                return False

    def load_model(self, model_id: int) -> AssembledModel:
        with self._lock.read():
            rec = self.get(model_id)
            chunks = self._payload_chunks(rec)
            if _digest(chunks) != rec.checksum:
                raise ChecksumMismatch(f"model {model_id} payload does not match its checksum")
        if rec.storage_kind is StorageKind.BLOB:
            out = AssembledModel(rec, payload=chunks[0])
            try:
                out.architecture, layers = unpack_blob(chunks[0])
                out.layers = [_with_owner(l, model_id) for l in layers]
            except CorruptFrame:
                pass  # opaque payload: no layer view
            return out
        if rec.storage_kind is StorageKind.DECOUPLED:
            base = self.base(rec.base_model)
            layers = [_layer_from_bytes(model_id, name, i, data)
                      for i, (name, data) in enumerate(zip(rec.layer_names, chunks))]
            return AssembledModel(rec, layers=layers, architecture=base.to_json())
        return AssembledModel(rec, api=rec.api)

    def load_layers(self, model_id: int, layer_names: Sequence[str]) -> list[LayerRecord]:
        """Read only the named layers of a decoupled model."""
        with self._lock.read():
            rec = self.get(model_id)
            if rec.storage_kind is not StorageKind.DECOUPLED:
                raise NotDecoupled(f"model {model_id} is stored as {rec.storage_kind.value}")
            out = []
            for name in layer_names:
                if name not in rec.layer_names:
                    raise UnknownLayer(f"model {model_id} has no layer {name!r}")
                index = rec.layer_names.index(name)
                p = self.layer_path(model_id, index)
                if not p.exists():
                    raise MissingLayer(f"model {model_id} is missing layer {index} ({p})")
                out.append(_layer_from_bytes(model_id, name, index, p.read_bytes()))
            return out

    def update_layer(self, model_id: int, layer: LayerRecord) -> str:
        """Replace one layer of a decoupled model; returns the new model checksum."""
        rec = self.get(model_id)
        if rec.storage_kind is not StorageKind.DECOUPLED:
            raise NotDecoupled(f"model {model_id} is stored as {rec.storage_kind.value}")
        if not 0 <= layer.layer_index < len(rec.layer_names):
            raise UnknownLayer(f"model {model_id} has no layer index {layer.layer_index}")
        spec = self.base(rec.base_model).layers[layer.layer_index]
        if layer.layer_name != spec.name:
            raise UnknownLayer(f"layer {layer.layer_index} is {spec.name!r}, not {layer.layer_name!r}")
        bias_shape = None if layer.bias is None else layer.bias.shape
        if layer.weight.shape != spec.weight_shape or bias_shape != spec.bias_shape:
            raise ShapeMismatch(f"layer {spec.name!r} shapes do not match base {rec.base_model!r}")
        data = layer.payload()
        with self._writing():
            chunks = self._payload_chunks(rec)
            chunks[layer.layer_index] = data
            checksum = _digest(chunks)
            _atomic_write(self.layer_path(model_id, layer.layer_index), data)
            self._line_bytes[model_id] += self._append(
                {"op": "checksum", "model_id": model_id, "checksum": checksum})
            self._records[model_id] = replace(rec, checksum=checksum)
        return checksum

    # -- accounting ----------------------------------------------------------

    def disk_usage(self, model_id: int) -> int:
        """Bytes on disk attributable to one model: its catalog lines plus payload files."""
        rec = self.get(model_id)
        total = self._line_bytes.get(model_id, 0)
        if rec.storage_kind is StorageKind.BLOB:
            total += self.blob_path(model_id).stat().st_size
        elif rec.storage_kind is StorageKind.DECOUPLED:
            total += sum(self.layer_path(model_id, i).stat().st_size for i in range(len(rec.layer_names)))
        return total

    def base_disk_usage(self, name: str) -> int:
        return self.base_path(name).stat().st_size


def _with_owner(layer: LayerRecord, model_id: int) -> LayerRecord:
    return LayerRecord(model_id, layer.layer_name, layer.layer_index, layer.weight, layer.bias)


def _layer_from_bytes(model_id: int, name: str, index: int, data: bytes) -> LayerRecord:
    frames = read_frames(data)
    if not 1 <= len(frames) <= 2:
        raise CorruptFrame(f"layer file for {name!r} holds {len(frames)} frames")
    return LayerRecord(model_id, name, index, frames[0], frames[1] if len(frames) == 2 else None)
