"""On-disk formats: SREG1 volumes, key=value run configs, CSV reports, datasets, checkpoints.

An SREG1 file is a short text header followed by a raw payload::

    SREG1
    kind=field
    dims=64x64
    components=2
    encoding=float64-le
    <blank line>
    <payload>

The payload is row-major with the vector component varying fastest, so a
field stored in memory as ``(n, *grid)`` is written as ``(*grid, n)``.
"""

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, fields

import numpy as np

from .losses import SanityConfig
from .synth import SyntheticPair

MAGIC = "SREG1"
KINDS = ("image", "field", "labels", "tensor")
ENCODINGS = {"float64-le": np.dtype("<f8"), "uint16-le": np.dtype("<u2")}


class FormatError(ValueError):
    """Raised for malformed or inconsistent files."""


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- volumes -----------------------------------------------------------------

def _format_dims(shape):
    return "x".join(str(int(s)) for s in shape)


def parse_shape(text):
    """``"64x64"`` -> ``(64, 64)``; the empty string is a 0-d shape."""
    text = text.strip()
    if not text:
        return ()
    try:
        shape = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise FormatError(f"bad shape {text!r}") from None
    if any(s < 1 for s in shape):
        raise FormatError(f"bad shape {text!r}")
    return shape


def encode_volume(array, kind):
    array = np.asarray(array)
    if kind not in KINDS:
        raise FormatError(f"unknown kind {kind!r}")
    if kind == "labels":
        if array.size and (array.min() < 0 or array.max() > 65535):
            raise FormatError("labels must fit in uint16")
        encoding, grid, comps = "uint16-le", array.shape, 1
        payload = np.ascontiguousarray(array, dtype="<u2")
    elif kind == "field":
        encoding, grid, comps = "float64-le", array.shape[1:], array.shape[0]
        payload = np.ascontiguousarray(np.moveaxis(array, 0, -1), dtype="<f8")
    else:
        encoding, grid, comps = "float64-le", array.shape, 1
        payload = np.ascontiguousarray(array, dtype="<f8")
    header = (f"{MAGIC}\nkind={kind}\ndims={_format_dims(grid)}\n"
              f"components={comps}\nencoding={encoding}\n\n")
    return header.encode("ascii") + payload.tobytes()


def decode_volume(data):
    """Return ``(kind, array)`` from SREG1 bytes."""
    end = data.find(b"\n\n")
    if end < 0 or not data.startswith(MAGIC.encode() + b"\n"):
        raise FormatError("not an SREG1 volume")
    lines = data[:end].decode("ascii").split("\n")[1:]
    try:
        meta = dict(line.split("=", 1) for line in lines)
    except ValueError:
        raise FormatError("malformed SREG1 header") from None
    missing = {"kind", "dims", "components", "encoding"} - set(meta)
    if missing:
        raise FormatError(f"SREG1 header lacks {sorted(missing)}")
    kind, encoding = meta["kind"], meta["encoding"]
    if kind not in KINDS or encoding not in ENCODINGS:
        raise FormatError(f"unsupported kind/encoding {kind}/{encoding}")
    grid = parse_shape(meta["dims"])
    comps = int(meta["components"])
    dtype = ENCODINGS[encoding]
    payload = data[end + 2:]
    expected = int(np.prod(grid, dtype=np.int64)) * comps * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, header implies {expected}")
    flat = np.frombuffer(payload, dtype=dtype)
    if kind == "field":
        array = np.moveaxis(flat.reshape(grid + (comps,)), -1, 0)
        return kind, np.ascontiguousarray(array, dtype=float)
    if comps != 1:
        raise FormatError(f"{kind} volumes have one component")
    array = flat.reshape(grid)
    return kind, (array.astype(np.uint16) if kind == "labels" else array.astype(float))


def write_volume(path, array, kind):
    atomic_write(path, encode_volume(array, kind))


def read_volume(path, kind=None):
    """Read an SREG1 file; when ``kind`` is given the stored kind must match."""
    with open(path, "rb") as fh:
        found, array = decode_volume(fh.read())
    if kind is not None and found != kind:
        raise FormatError(f"{path}: expected a {kind} volume, found {found}")
    return array


# --- run configuration -------------------------------------------------------

@dataclass
class RunConfig:
    """Everything a CLI run needs; serialised as a flat key=value file."""

    alpha: float = 0.1
    beta: float = 0.3
    lambda_r: float = 1.0
    lambda_s: float = 0.1
    lambda_c: float = 0.001
    ncc_window: int = 9
    spacing: tuple = (1.0, 1.0)
    similarity: str = "ncc"
    coordinate_gradient: bool = False
    sanity_reduction: str = "sum"
    backend: str = "model"
    epochs: int = 10
    steps: int = 200
    learning_rate: float = 1e-3
    seed: int = 0
    width: int = 16
    dataset: str = ""
    monitor: str = ""
    init_checkpoint: str = ""
    output: str = "run"

    def __post_init__(self):
        if self.backend not in ("model", "direct"):
            raise ValueError(f"backend must be 'model' or 'direct', got {self.backend!r}")
        if self.epochs < 1 or self.steps < 1:
            raise ValueError("epochs and steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.sanity()

    def sanity(self):
        names = {f.name for f in fields(SanityConfig)}
        return SanityConfig(**{k: getattr(self, k) for k in names})

    def dumps(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def hash(self):
        """Short digest of the settings; file locations are left out."""
        lines = [ln for ln in self.dumps().splitlines()
                 if ln.split("=", 1)[0] not in PATH_KEYS]
        return text_hash("\n".join(lines))

    @classmethod
    def loads(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"line {n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise FormatError(f"line {n}: unknown key {key!r}")
            values[key] = _coerce(key, types[key], value)
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise FormatError(str(exc)) from None

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())


PATH_KEYS = ("dataset", "monitor", "init_checkpoint", "output")


def text_hash(text):
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _coerce(key, kind, value):
    try:
        if kind in (float, "float"):
            return float(value)
        if kind in (int, "int"):
            return int(value)
        if kind in (bool, "bool"):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if kind in (tuple, "tuple"):
            return tuple(float(v) for v in value.split(","))
    except ValueError:
        raise FormatError(f"{key}: cannot parse {value!r}") from None
    return value


# --- CSV ---------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return "" if v is None else str(v)


def format_csv(rows, columns=None, config_hash=None):
    """CSV text with an optional ``# config_hash=`` comment line and a header row."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    if config_hash is not None:
        buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns=None, config_hash=None):
    atomic_write(path, format_csv(rows, columns, config_hash))


def read_csv(path):
    """Return ``(config_hash or None, list of dict rows)`` with string values."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    chash = None
    if lines and lines[0].startswith("# config_hash="):
        chash = lines[0].split("=", 1)[1]
        lines = lines[1:]
    return chash, list(csv.DictReader(lines))


# --- datasets ----------------------------------------------------------------

PAIR_FILES = {
    "moving": "image", "fixed": "image",
    "moving_labels": "labels", "fixed_labels": "labels",
    "true_field": "field",
    "moving_landmarks": "tensor", "fixed_landmarks": "tensor",
}


def write_dataset(directory, pairs, params):
    """One sub-directory per pair plus ``manifest.json`` listing files, seeds and parameters."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        name = f"pair_{i:03d}"
        os.makedirs(os.path.join(directory, name), exist_ok=True)
        files = {}
        for key, kind in PAIR_FILES.items():
            rel = f"{name}/{key}.sreg"
            write_volume(os.path.join(directory, rel), getattr(pair, key), kind)
            files[key] = rel
        entries.append({"name": name, "seed": int(pair.seed), "files": files})
    manifest = {"format": "sanereg-dataset-1", "parameters": params, "pairs": entries}
    atomic_write(os.path.join(directory, "manifest.json"),
                 json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(directory):
    path = os.path.join(directory, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    pairs = []
    for entry in manifest["pairs"]:
        arrays = {key: read_volume(os.path.join(directory, entry["files"][key]), kind)
                  for key, kind in PAIR_FILES.items()}
        pairs.append(SyntheticPair(seed=entry["seed"], **arrays))
    return pairs


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(directory, state, config, extra=None):
    """Write one tensor file per parameter, the config and a manifest."""
    os.makedirs(directory, exist_ok=True)
    tensors = {}
    for name, value in state.items():
        rel = f"{name}.sreg"
        write_volume(os.path.join(directory, rel), value, "tensor")
        tensors[name] = {"file": rel, "shape": list(np.shape(value))}
    atomic_write(os.path.join(directory, "config.txt"), config.dumps())
    manifest = {"format": "sanereg-checkpoint-1", "config_hash": config.hash(),
                "tensors": tensors}
    manifest.update(extra or {})
    atomic_write(os.path.join(directory, "manifest.json"),
                 json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    """Return ``(state, config, manifest)``."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    state = {}
    for name, meta in manifest["tensors"].items():
        value = read_volume(os.path.join(directory, meta["file"]), "tensor")
        if list(value.shape) != meta["shape"]:
            raise FormatError(f"{name}: shape {value.shape} differs from manifest")
        state[name] = value
    config = RunConfig.load(os.path.join(directory, "config.txt"))
    return state, config, manifest
