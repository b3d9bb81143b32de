"""Full and delta checkpoints.

Little-endian layout::

    magic        8s   b"PSEGCKPT"
    version      H
    kind         B    0 = full, 1 = delta
    fingerprint  32s  sha256 of the model + prompt configuration
    header_len   I
    header       utf-8 JSON: configs, strategy, frozen-weight digest
    blob_count   I
    per blob:    H name_len, name, B dtype, B ndim, ndim * I dims
    buffers      raw blob bytes in table order

A delta carries only the strategy's learnable blobs plus a digest of every
other weight, so it can only be applied to the exact backbone it was tuned on.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import FingerprintError, FormatError
from .model import ModelConfig, PromptConfig, SegModel, architecture_fingerprint
from .tuning import select_learnable

MAGIC = b"PSEGCKPT"
VERSION = 1
KIND_FULL, KIND_DELTA = 0, 1
_DTYPES = {0: np.float32, 1: np.float64}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _digest(model, names):
    h = hashlib.sha256()
    for n in names:
        h.update(n.encode())
        h.update(model.params[n].data.tobytes())
    return h.hexdigest()


def _write(path, kind, model, names, header):
    fp = bytes.fromhex(model.fingerprint)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HB", VERSION, kind))
        fh.write(fp)
        fh.write(struct.pack("<I", len(head)) + head)
        fh.write(struct.pack("<I", len(names)))
        for n in names:
            arr = model.params[n].data
            raw = n.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for n in names:
            arr = model.params[n].data
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _header(model, strategy, names):
    frozen = [n for n in model.params if n not in set(names)]
    return {
        "model_config": model.config.to_dict(),
        "prompt_config": model.prompt_config.to_dict(),
        "strategy": strategy,
        "seed": model.seed,
        "frozen_digest": _digest(model, frozen),
        "dtype": np.dtype(model.dtype).name,
    }


def save_full(model, path, strategy="full"):
    names = list(model.params)
    _write(path, KIND_FULL, model, names, _header(model, strategy, names))


def save_delta(model, path, strategy):
    """Persist only the strategy's learnable parameters."""
    names = select_learnable(model, strategy)
    _write(path, KIND_DELTA, model, names, _header(model, strategy, names))


class _Reader:
    def __init__(self, buf):
        self.buf, self.off = buf, 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.off)
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    """Parse a checkpoint into ``(kind, fingerprint, header, {name: array})``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(8, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, kind = r.unpack("<HB", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    if kind not in (KIND_FULL, KIND_DELTA):
        raise FormatError(f"unknown checkpoint kind {kind}", 10)
    fingerprint = r.take(32, "fingerprint").hex()
    (hlen,) = r.unpack("<I", "header length")
    start = r.off
    try:
        header = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}", start) from exc
    (count,) = r.unpack("<I", "blob count")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "blob name length")
        name = r.take(nlen, "blob name").decode()
        code, ndim = r.unpack("<BB", "blob dtype")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for blob {name}", r.off - 2)
        shape = r.unpack(f"<{ndim}I", "blob shape")
        table.append((name, _DTYPES[code], shape))
    blobs = {}
    for name, dtype, shape in table:
        dt = np.dtype(dtype).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        blobs[name] = np.frombuffer(r.take(nbytes, f"blob {name}"), dtype=dt).reshape(shape).astype(dtype)
    if r.off != len(r.buf):
        raise FormatError("trailing bytes after last blob", r.off)
    return kind, fingerprint, header, blobs


def _configs(header):
    return ModelConfig.from_dict(header["model_config"]), PromptConfig.from_dict(header["prompt_config"])


def load_full(path):
    kind, fingerprint, header, blobs = read_checkpoint(path)
    if kind != KIND_FULL:
        raise FormatError("expected a full checkpoint, found a delta")
    config, prompt_config = _configs(header)
    if architecture_fingerprint(config, prompt_config) != fingerprint:
        raise FingerprintError("full checkpoint header does not match its fingerprint")
    model = SegModel(config, prompt_config, seed=header.get("seed", 0), dtype=np.dtype(header["dtype"]).type)
    if set(blobs) != set(model.params):
        raise FormatError("checkpoint parameter set does not match its architecture")
    for name, arr in blobs.items():
        model.params[name].data[...] = arr
    return model


def load_delta(path, backbone):
    """Apply a delta onto ``backbone`` and return the resulting model.

    A promptless backbone is given the delta's prompt configuration first.
    Refuses when the architecture fingerprint or the frozen weights differ.
    """
    kind, fingerprint, header, blobs = read_checkpoint(path)
    if kind != KIND_DELTA:
        raise FormatError("expected a delta checkpoint, found a full one")
    config, prompt_config = _configs(header)
    host_fp = architecture_fingerprint(backbone.config, prompt_config)
    if host_fp != fingerprint:
        raise FingerprintError(f"delta fingerprint {fingerprint} does not match backbone fingerprint {host_fp}")
    if backbone.prompt_config == prompt_config:
        model = backbone.copy()
    elif backbone.prompt_config.mode == "none":
        model = backbone.with_prompts(prompt_config)
    else:
        raise FingerprintError(
            f"backbone carries prompts {backbone.prompt_config} incompatible with delta prompts {prompt_config}"
        )
    unknown = set(blobs) - set(model.params)
    if unknown:
        raise FormatError(f"delta holds unknown parameters {sorted(unknown)}")
    frozen = [n for n in model.params if n not in blobs]
    digest = _digest(model, frozen)
    if digest != header["frozen_digest"]:
        raise FingerprintError(f"backbone weights digest {digest} differs from the delta's {header['frozen_digest']}")
    for name, arr in blobs.items():
        if arr.shape != model.params[name].shape:
            raise FormatError(f"blob {name} has shape {arr.shape}, expected {model.params[name].shape}")
        model.params[name].data[...] = arr
    return model
