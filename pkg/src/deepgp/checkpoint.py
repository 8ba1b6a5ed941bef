"""Self-describing binary checkpoints.

Layout::

    DEEPGP-CHECKPOINT\\n
    <header byte length>\\n
    <UTF-8 JSON header>\\n
    <tensor blocks, little-endian float64, in header order>

The header records the format version, the model architecture, an echo of
the run configuration, the optimiser scalars, RNG stream states, the best
ELBO, and a table of tensor blocks (name, shape, byte offset, CRC-32).
Parameters, Adam moments and any array-valued extras are tensor blocks.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .model import DGPModel
from .training import AdamState, Trainer, TrainConfig

MAGIC = b"DEEPGP-CHECKPOINT\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"checkpoint field {field_name!r}: {message}")
        self.field = field_name


@dataclass
class CheckpointData:
    model: DGPModel
    config: dict[str, Any] = field(default_factory=dict)
    optimizer: AdamState | None = None
    rng_states: dict[str, Any] = field(default_factory=dict)
    best_elbo: float = float("-inf")
    epoch: int = 0
    extra: dict[str, Any] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _jsonable_state(state: Any) -> Any:
    if isinstance(state, dict):
        return {k: _jsonable_state(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__uint64__": [int(x) for x in state.ravel()]}
    if isinstance(state, np.integer):
        return int(state)
    return state


def _restore_state(state: Any) -> Any:
    if isinstance(state, dict):
        if set(state) == {"__uint64__"}:
            return np.array(state["__uint64__"], dtype=np.uint64)
        return {k: _restore_state(v) for k, v in state.items()}
    return state


def save_checkpoint(
    model: DGPModel,
    path: str | os.PathLike,
    trainer: Trainer | None = None,
    extra: Mapping[str, Any] | None = None,
    config: Mapping[str, Any] | None = None,
) -> Path:
    """Atomically write ``model`` (and optionally the trainer state) to ``path``.

    ``extra`` values that are arrays become tensor blocks under ``extra/``;
    everything else must be JSON-serialisable and goes into the header.
    """
    path = Path(path)
    tensors: list[tuple[str, np.ndarray]] = [(k, v) for k, v in model.parameters().items()]
    header: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "model": model.config(),
        "config": dict(config or {}),
        "best_elbo": float("-inf"),
        "epoch": 0,
        "optimizer": None,
        "rng": {},
        "extra": {},
    }
    if trainer is not None:
        opt = trainer.optimizer
        header["optimizer"] = {
            "learning_rate": opt.learning_rate,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "step": opt.step,
        }
        tensors += [(f"adam/m/{k}", v) for k, v in opt.m.items()]
        tensors += [(f"adam/v/{k}", v) for k, v in opt.v.items()]
        header["rng"] = {k: _jsonable_state(g.bit_generator.state) for k, g in trainer.streams.items()}
        header["best_elbo"] = trainer.best_elbo
        header["epoch"] = trainer.epoch
        if not config:
            header["config"] = {"training": vars(trainer.config).copy()}
    for key, value in (extra or {}).items():
        if isinstance(value, np.ndarray):
            tensors.append((f"extra/{key}", value))
        else:
            header["extra"][key] = value

    table = []
    blobs = []
    offset = 0
    for name, value in tensors:
        blob = np.ascontiguousarray(value, dtype=_DTYPE).tobytes()
        table.append({"name": name, "shape": list(np.shape(value)), "offset": offset, "crc32": zlib.crc32(blob)})
        blobs.append(blob)
        offset += len(blob)
    header["tensors"] = table
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(f"{len(header_bytes)}\n".encode("ascii"))
            f.write(header_bytes)
            f.write(b"\n")
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _require(header: Mapping, key: str, kind, where: str = ""):
    name = f"{where}{key}"
    if key not in header:
        raise CheckpointError(name, "missing")
    value = header[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise CheckpointError(name, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def read_checkpoint(path: str | os.PathLike) -> CheckpointData:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError("magic", "not a checkpoint file")
    pos = len(MAGIC)
    newline = data.find(b"\n", pos)
    if newline < 0:
        raise CheckpointError("header_length", "truncated")
    try:
        header_len = int(data[pos:newline].decode("ascii"))
    except ValueError:
        raise CheckpointError("header_length", "not an integer") from None
    start = newline + 1
    end = start + header_len
    if header_len < 0 or end + 1 > len(data) or data[end : end + 1] != b"\n":
        raise CheckpointError("header", "truncated")
    try:
        header = json.loads(data[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("header", f"malformed JSON ({exc})") from None
    if not isinstance(header, dict):
        raise CheckpointError("header", "not an object")
    version = _require(header, "format_version", int)
    if version != FORMAT_VERSION:
        raise CheckpointError("format_version", f"unsupported version {version} (expected {FORMAT_VERSION})")
    model_config = _require(header, "model", dict)
    try:
        model = DGPModel.from_config(model_config)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError("model", str(exc)) from None

    body = data[end + 1 :]
    tensors: dict[str, np.ndarray] = {}
    for i, entry in enumerate(_require(header, "tensors", list)):
        where = f"tensors[{i}]."
        if not isinstance(entry, dict):
            raise CheckpointError(f"tensors[{i}]", "not an object")
        name = _require(entry, "name", str, where)
        shape = _require(entry, "shape", list, where)
        offset = _require(entry, "offset", int, where)
        crc = _require(entry, "crc32", int, where)
        if any(not isinstance(s, int) or s < 0 for s in shape):
            raise CheckpointError(f"{where}shape", f"invalid shape {shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset < 0 or offset + nbytes > len(body):
            raise CheckpointError(f"{where}offset", f"block for {name!r} runs past end of file")
        blob = body[offset : offset + nbytes]
        if zlib.crc32(blob) != crc:
            raise CheckpointError(f"{where}crc32", f"checksum mismatch for {name!r}")
        tensors[name] = np.frombuffer(blob, dtype=_DTYPE).reshape(shape).astype(np.float64)

    params = model.parameters()
    missing = [k for k in params if k not in tensors]
    if missing:
        raise CheckpointError("tensors", f"missing parameter {missing[0]!r}")
    try:
        model.set_parameters({k: tensors[k] for k in params})
    except Exception as exc:  # shape mismatches against the declared architecture
        raise CheckpointError("tensors", str(exc)) from None

    optimizer = None
    opt = header.get("optimizer")
    if opt is not None:
        if not isinstance(opt, dict):
            raise CheckpointError("optimizer", "not an object")
        optimizer = AdamState(
            learning_rate=float(_require(opt, "learning_rate", (int, float), "optimizer.")),
            beta1=float(_require(opt, "beta1", (int, float), "optimizer.")),
            beta2=float(_require(opt, "beta2", (int, float), "optimizer.")),
            eps=float(_require(opt, "eps", (int, float), "optimizer.")),
            step=_require(opt, "step", int, "optimizer."),
            m={k[len("adam/m/") :]: v for k, v in tensors.items() if k.startswith("adam/m/")},
            v={k[len("adam/v/") :]: v for k, v in tensors.items() if k.startswith("adam/v/")},
        )
    arrays = {k[len("extra/") :]: v for k, v in tensors.items() if k.startswith("extra/")}
    return CheckpointData(
        model=model,
        config=_require(header, "config", dict),
        optimizer=optimizer,
        rng_states={k: _restore_state(v) for k, v in _require(header, "rng", dict).items()},
        best_elbo=float(_require(header, "best_elbo", (int, float))),
        epoch=_require(header, "epoch", int),
        extra=_require(header, "extra", dict),
        arrays=arrays,
    )


def load_checkpoint(path: str | os.PathLike) -> DGPModel:
    return read_checkpoint(path).model


def restore_trainer(checkpoint: CheckpointData, config: TrainConfig) -> Trainer:
    """A trainer that continues from the saved optimiser and RNG positions."""
    trainer = Trainer(checkpoint.model, config)
    if checkpoint.optimizer is not None:
        trainer.optimizer = checkpoint.optimizer
    for name, state in checkpoint.rng_states.items():
        trainer.streams[name].bit_generator.state = state
    trainer.epoch = checkpoint.epoch
    trainer.best_elbo = checkpoint.best_elbo
    return trainer
