"""On-disk checkpoints: a text manifest plus little-endian array blobs.

Layout of a checkpoint directory::

    manifest.json   format version, array table (name/shape/dtype/offset), schedule counters
    arrays.bin      parameters, optimizer moments and normalizer stats, float64 little-endian
    memory.bin      task memory in the MEMTS byte format
    config.cfg      resolved run config (parse_config reads it back)

Directories are written to a sibling temp dir and renamed into place, so a
failed save never leaves a half-written checkpoint behind.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import Forecaster
from .config import RunConfig, dump_config, parse_config
from .data import Normalizer
from .errors import ConfigurationError, PersistenceError
from .memory import MemoryState, persist, restore
from .training import OptimizerState

FORMAT_VERSION = 1
DTYPE = "<f8"


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    memory: MemoryState | None
    normalizer: Normalizer | None = None
    optimizer: OptimizerState | None = None
    iterations: int = 0
    tick: int = 0

    def build_model(self) -> Forecaster:
        model = Forecaster(self.config.model, seed=self.config.seed)
        try:
            model.load_state_dict(self.params)
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"checkpoint does not match its model config: {exc}") from None
        model.eval()
        return model


def _pack(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        table.append(dict(name=name, shape=list(np.shape(arr)), dtype=DTYPE, offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def _unpack(table: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    for entry in table:
        if entry["dtype"] != DTYPE:
            raise PersistenceError(f"{entry['name']}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        start = entry["offset"]
        if n != entry["nbytes"] or start + n > len(blob):
            raise PersistenceError(f"{entry['name']}: array extends past end of blob")
        out[entry["name"]] = np.frombuffer(blob, dtype=DTYPE, count=n // 8, offset=start).reshape(shape).astype(
            np.float64)
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.normalizer is not None:
        arrays["normalizer/means"] = ckpt.normalizer.means
        arrays["normalizer/stds"] = ckpt.normalizer.stds
    opt_meta = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt_meta = dict(step=o.step, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
        for k in o.m:
            arrays[f"adam_m/{k}"] = o.m[k]
            arrays[f"adam_v/{k}"] = o.v[k]
    table, blob = _pack(arrays)
    manifest = dict(format_version=FORMAT_VERSION, byte_order="little", arrays=table,
                    memory="memory.bin" if ckpt.memory is not None else None,
                    optimizer=opt_meta, iterations=ckpt.iterations, tick=ckpt.tick)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / "arrays.bin").write_bytes(blob)
        if ckpt.memory is not None:
            (tmp / "memory.bin").write_bytes(persist(ckpt.memory))
        (tmp / "config.cfg").write_text(dump_config(ckpt.config), encoding="utf-8")
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        blob = (path / "arrays.bin").read_bytes()
        cfg_text = (path / "config.cfg").read_text(encoding="utf-8")
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"{path}: not a readable checkpoint ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise PersistenceError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    arrays = _unpack(manifest["arrays"], blob)
    cfg = parse_config(cfg_text, str(path / "config.cfg"))

    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    norm = None
    if "normalizer/means" in arrays:
        norm = Normalizer(arrays["normalizer/means"], arrays["normalizer/stds"])
    opt = None
    if manifest.get("optimizer"):
        meta = manifest["optimizer"]
        opt = OptimizerState(step=meta["step"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
        for k, v in arrays.items():
            if k.startswith("adam_m/"):
                opt.m[k[7:]] = v.copy()
            elif k.startswith("adam_v/"):
                opt.v[k[7:]] = v.copy()
    memory = None
    if manifest.get("memory"):
        memory = restore((path / manifest["memory"]).read_bytes(), cfg.model.n_slots, cfg.model.d_rm)
    return Checkpoint(cfg, params, memory, norm, opt, manifest.get("iterations", 0), manifest.get("tick", 0))


def write_memory(path: str | Path, state: MemoryState) -> None:
    """Replace only the memory blob of an existing checkpoint, atomically."""
    target = Path(path) / "memory.bin"
    fd, tmp = tempfile.mkstemp(prefix=".memory.", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(persist(state))
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
