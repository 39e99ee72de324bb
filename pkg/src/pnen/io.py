"""File formats: PNT1 raw tensors, binary PGM/PPM images and checkpoints.

PNT1 layout::

    PNT1\\n
    n c h w dtype\\n          (dtype is f32 or f64)
    <n*c*h*w little-endian values>

A checkpoint is ``<stem>.manifest`` (text) plus ``<stem>.pnt`` holding every
parameter and buffer flattened into one 1x1x1xN PNT1 tensor.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

PNT_MAGIC = b"PNT1\n"
_PNT_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
CHECKPOINT_FORMAT = 1


def _tag(dtype) -> str:
    dt = np.dtype(dtype)
    if dt == np.float32:
        return "f32"
    if dt == np.float64:
        return "f64"
    raise DataError(f"PNT1 supports f32/f64 only, got {dt}")


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise DataError(f"PNT1 holds at most 4 axes, got shape {arr.shape}")
    shape = (1,) * (4 - arr.ndim) + arr.shape
    tag = _tag(arr.dtype)
    header = PNT_MAGIC + ("%d %d %d %d %s\n" % (*shape, tag)).encode("ascii")
    return header + np.ascontiguousarray(arr, dtype=_PNT_DTYPES[tag]).tobytes()


def decode_tensor(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if not raw.startswith(PNT_MAGIC):
        raise DataError(f"{source}: missing PNT1 magic")
    end = raw.find(b"\n", len(PNT_MAGIC))
    if end < 0:
        raise DataError(f"{source}: truncated PNT1 header")
    fields = raw[len(PNT_MAGIC) : end].decode("ascii", "replace").split()
    if len(fields) != 5 or fields[4] not in _PNT_DTYPES:
        raise DataError(f"{source}: malformed PNT1 header {fields}")
    try:
        shape = tuple(int(v) for v in fields[:4])
    except ValueError as exc:
        raise DataError(f"{source}: malformed PNT1 header {fields}") from exc
    dt = _PNT_DTYPES[fields[4]]
    count = int(np.prod(shape))
    payload = raw[end + 1 :]
    if len(payload) != count * dt.itemsize:
        raise DataError(f"{source}: payload has {len(payload)} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(payload, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(shape)


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(np.asarray(arr)))


def read_tensor(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such tensor file: {p}")
    return decode_tensor(p.read_bytes(), str(p))


# --- netpbm -----------------------------------------------------------------


def _read_header_tokens(raw: bytes, count: int, source: str) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError(f"{source}: truncated header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise DataError(f"{source}: malformed header")
    return tokens, pos + 1


def decode_image(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Binary P5/P6 bytes -> float64 array (channels, h, w) in [0, 1]."""
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{source}: unsupported magic {magic!r} (need P5 or P6)")
    tokens, offset = _read_header_tokens(raw, 4, source)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{source}: malformed header") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise DataError(f"{source}: need 8-bit maxval 255 and positive size, got {w}x{h} max {maxval}")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    body = raw[offset : offset + need]
    if len(body) < need:
        raise DataError(f"{source}: truncated payload ({len(body)} of {need} bytes)")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8; clamps, then rounds half away from zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def encode_image(img: np.ndarray) -> bytes:
    arr = np.asarray(img)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DataError(f"can only write a single image, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    if c not in (1, 3):
        raise DataError(f"images need 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    return magic + b"\n%d %d\n255\n" % (w, h) + quantize(arr).transpose(1, 2, 0).tobytes()


def read_image(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such image: {p}")
    return decode_image(p.read_bytes(), str(p))


def write_image(img, path) -> None:
    Path(path).write_bytes(encode_image(np.asarray(img)))


# --- checkpoints -------------------------------------------------------------


def _state_entries(model) -> list[tuple[str, np.ndarray]]:
    from .layers import BatchNormLayer

    entries = [(name, p.data) for name, p in model.named_parameters()]
    named = {}

    def walk(mod, prefix):
        named[id(mod)] = prefix
        for cname, child in mod.named_children():
            walk(child, f"{prefix}{cname}.")

    walk(model, "")
    for mod in model.modules():
        if isinstance(mod, BatchNormLayer):
            prefix = named[id(mod)]
            entries.append((prefix + "running_mean", mod.running_mean))
            entries.append((prefix + "running_var", mod.running_var))
    return entries


def save_checkpoint(model, stem) -> tuple[Path, Path]:
    """Write ``stem.manifest`` + ``stem.pnt``; returns both paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = _state_entries(model)
    dtype = model.cfg.np_dtype
    itemsize = np.dtype(dtype).itemsize
    lines = [f"pnen-checkpoint {CHECKPOINT_FORMAT}"]
    for key, val in model.cfg.to_dict().items():
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"config {key}={val}")
    offset = 0
    for name, arr in entries:
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {shape} {offset}")
        offset += arr.size * itemsize
    flat = np.concatenate([a.ravel().astype(dtype) for _, a in entries])
    blob = stem.with_suffix(".pnt")
    manifest = stem.with_suffix(".manifest")
    lines.append(f"blob {blob.name} {offset}")
    write_tensor(blob, flat.reshape(1, 1, 1, -1))
    manifest.write_text("\n".join(lines) + "\n")
    return manifest, blob


def load_checkpoint(path):
    """Rebuild a :class:`PnenModel` from a manifest (or its stem)."""
    from .backbone import ModelConfig, PnenModel

    p = Path(path)
    manifest = p if p.suffix == ".manifest" else p.with_suffix(".manifest")
    if not manifest.is_file():
        raise DataError(f"no such checkpoint manifest: {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].split()[:1] != ["pnen-checkpoint"]:
        raise DataError(f"{manifest}: not a checkpoint manifest")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_FORMAT:
        raise DataError(f"{manifest}: unsupported checkpoint format {version}")
    cfg, tensors, blob_name = {}, [], None
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            key, _, val = rest.partition("=")
            cfg[key] = val
        elif kind == "tensor":
            name, shape, offset = rest.split()
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            tensors.append((name, dims, int(offset)))
        elif kind == "blob":
            blob_name = rest.split()[0]
    ints = {"c", "d", "m", "n", "S", "M", "seed"}
    kwargs = {}
    for key, val in cfg.items():
        if key in ints:
            kwargs[key] = int(val)
        elif key in ("scales", "pool_sizes"):
            kwargs[key] = tuple(int(v) for v in val.split(",") if v)
        else:
            kwargs[key] = val
    model = PnenModel(ModelConfig(**kwargs))
    flat = read_tensor(manifest.parent / blob_name).ravel()
    itemsize = flat.dtype.itemsize
    targets = dict(_state_entries(model))
    if set(targets) != {t[0] for t in tensors}:
        raise DataError(f"{manifest}: tensor names do not match the model layout")
    for name, dims, offset in tensors:
        dst = targets[name]
        if dst.shape != dims:
            raise DataError(f"{manifest}: {name} has shape {dims}, model expects {dst.shape}")
        start = offset // itemsize
        dst[...] = flat[start : start + dst.size].reshape(dims)
    return model
