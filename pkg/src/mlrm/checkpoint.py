"""Binary checkpoint format for parameters, optimizer moments and configs.

Layout, all integers little-endian:

    magic   8 bytes  b"MLRMCKPT"
    version u32      currently 1
    count   u32      number of array records
    records          name_len u32, name bytes (UTF-8),
                     rank u32, dims u32 * rank,
                     payload float64 LE, row-major
    trailer          UTF-8 JSON to end of file:
                     {"model": ..., "loss": ..., "optim": ..., "run": ...,
                      "step": int, "vocab": [tokens]}

Optimizer moments travel as ordinary records under the reserved
prefixes "adam.m." / "adam.v.", the shared step counter as the rank-0
record "adam.t". Frozen-or-not is not stored per record; it is
reconstructed from the model config on load.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"MLRMCKPT"
VERSION = 1

_M_PREFIX = "adam.m."
_V_PREFIX = "adam.v."
_T_NAME = "adam.t"


def _write_record(fh, name: str, array: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", array.ndim))
    for dim in array.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def _read_record(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "record name length"))
    name = _read_exact(fh, name_len, "record name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 8 * count, f"payload of {name}")
    data = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return name, data


def save_checkpoint(path, params, moments: dict | None,
                    step: int, configs: dict, vocab_tokens: list[str]) -> None:
    """``moments`` is {"m": {name: array}, "v": {name: array}, "t": int}."""
    records: list[tuple[str, np.ndarray]] = [
        (name, params[name].data) for name in sorted(params)
    ]
    if moments is not None:
        for name in sorted(moments["m"]):
            records.append((_M_PREFIX + name, moments["m"][name]))
        for name in sorted(moments["v"]):
            records.append((_V_PREFIX + name, moments["v"][name]))
        records.append((_T_NAME, np.asarray(float(moments["t"]))))
    trailer = dict(configs)
    trailer["step"] = int(step)
    trailer["vocab"] = list(vocab_tokens)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for name, array in records:
            _write_record(fh, name, array)
        fh.write(json.dumps(trailer, separators=(",", ":")).encode("utf-8"))


def load_checkpoint(path, expect_model: dict | None = None):
    """Returns (arrays, moments, step, configs, vocab_tokens).

    ``arrays`` maps parameter name to ndarray; turning them back into
    live tensors (with the right requires_grad) is the caller's job
    because freezing depends on the model config. ``moments`` is None
    when the checkpoint carries no optimizer state.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, data = _read_record(fh)
            if name in arrays:
                raise FormatError(f"{path}: duplicate record {name!r}")
            arrays[name] = data
        try:
            trailer = json.loads(fh.read().decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: bad config trailer ({exc})") from None

    for key in ("model", "step", "vocab"):
        if key not in trailer:
            raise FormatError(f"{path}: config trailer missing {key!r}")
    if expect_model is not None and trailer["model"] != expect_model:
        raise ConfigError(f"{path}: checkpoint was trained with a different model config")

    moments = None
    first = {k[len(_M_PREFIX):]: a for k, a in arrays.items() if k.startswith(_M_PREFIX)}
    second = {k[len(_V_PREFIX):]: a for k, a in arrays.items() if k.startswith(_V_PREFIX)}
    if _T_NAME in arrays:
        moments = {"m": first, "v": second, "t": int(arrays[_T_NAME])}
    plain = {k: a for k, a in arrays.items()
             if not k.startswith((_M_PREFIX, _V_PREFIX)) and k != _T_NAME}
    step = int(trailer.pop("step"))
    vocab_tokens = trailer.pop("vocab")
    return plain, moments, step, trailer, vocab_tokens
