"""Versioned binary checkpoints shared by training, extraction and CKA.

Layout::

    b"BYCK" | u32 version | u64 header_len | header (utf-8 JSON) | tensor payload | sha256 (32 bytes)

The header holds ``config`` (echo of every config used to build the model),
``meta`` (step counters, rng state, normalization statistics) and a tensor
index of ``{name, dtype, shape, offset, nbytes}`` entries. Tensors are stored
little endian as ``f32``, ``f64`` or ``i64``. The trailing hash covers every
preceding byte, and files are written to a temporary name and then renamed.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationConfig, MixupMemoryBank
from .encoders import Encoder, EncoderConfig, build_encoder
from .frontend import NormalizationStats
from .trainer import BYOLNetwork, HeadConfig, TrainConfig, TrainerState

MAGIC = b"BYCK"
FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    meta: dict
    tensors: dict

    def subset(self, prefix: str) -> dict:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _dtype_code(a: np.ndarray) -> str:
    if a.dtype.kind == "f":
        return "f64" if a.dtype.itemsize == 8 else "f32"
    if a.dtype.kind in "iub":
        return "i64"
    raise CheckpointError(f"unsupported tensor dtype {a.dtype}")


def _as_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def checkpoint_bytes(tensors: dict, config: dict, meta: dict | None = None) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        a = _as_array(tensors[name])
        code = _dtype_code(a)
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        index.append({"name": name, "dtype": code, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": index}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, tensors: dict, config: dict, meta: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(tensors, config, meta))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    """Verify the hash and version, then decode every tensor."""
    if len(blob) < _PREFIX.size + 32:
        raise CheckpointError("checkpoint integrity: file truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity: hash mismatch")
    magic, version, header_len = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size + header_len
    header = json.loads(body[_PREFIX.size : start].decode("utf-8"))
    tensors = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        raw = body[lo : lo + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError("checkpoint integrity: tensor out of bounds")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
    return Checkpoint(header["config"], header["meta"], tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Model and trainer state


def _module_tensors(prefix: str, module: torch.nn.Module) -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def _load_module(module: torch.nn.Module, tensors: dict) -> None:
    state = module.state_dict()
    if set(state) != set(tensors):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    module.load_state_dict({k: torch.as_tensor(v).to(state[k].dtype) for k, v in tensors.items()})


def _stats_meta(stats: NormalizationStats) -> dict:
    return {"mean": float(stats.mean), "std": float(stats.std)}


def save_encoder(path, encoder: Encoder, encoder_cfg: EncoderConfig, stats: NormalizationStats, extra: dict | None = None) -> None:
    """Encoder-only checkpoint (e.g. a randomly initialized baseline)."""
    config = {"encoder": encoder_cfg.to_dict(), **(extra or {})}
    save_checkpoint(path, _module_tensors("online_encoder.", encoder), config, {"stats": _stats_meta(stats)})


def load_encoder(path) -> tuple[Encoder, NormalizationStats, Checkpoint]:
    """Online encoder, its normalization statistics and the raw checkpoint."""
    ck = load_checkpoint(path)
    try:
        cfg = EncoderConfig(**ck.config["encoder"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint lacks a valid encoder config ({exc})") from None
    enc = build_encoder(cfg)
    _load_module(enc, ck.subset("online_encoder."))
    enc.eval()
    s = ck.meta["stats"]
    return enc, NormalizationStats(s["mean"], s["std"]), ck


def trainer_tensors(state: TrainerState) -> dict:
    net = state.network
    tensors = {}
    for name in ("online_encoder", "online_projector", "predictor", "target_encoder", "target_projector"):
        tensors.update(_module_tensors(name + ".", getattr(net, name)))
    for idx, entry in state.optimizer.state_dict()["state"].items():
        for key, value in entry.items():
            tensors[f"optim.{idx}.{key}"] = value
    for i, seg in enumerate(state.bank.entries):
        tensors[f"bank.{i:06d}"] = seg
    return tensors


def save_trainer(
    path,
    state: TrainerState,
    encoder_cfg: EncoderConfig,
    heads: HeadConfig,
    cfg: TrainConfig,
    extra_config: dict | None = None,
    feature_standardizer=None,
) -> None:
    """Full resumable state: both branches, Adam moments, mixup bank, rng and counters."""
    tensors = trainer_tensors(state)
    if feature_standardizer is not None:
        tensors["features.mean"] = feature_standardizer.mean
        tensors["features.std"] = feature_standardizer.std
    groups = state.optimizer.state_dict()["param_groups"]
    config = {
        "encoder": encoder_cfg.to_dict(),
        "heads": dict(vars(heads)),
        "trainer": cfg.to_dict(),
        "augmentation": state.aug.to_dict(),
        **(extra_config or {}),
    }
    meta = {
        "stats": _stats_meta(state.stats),
        "seed": state.seed,
        "epoch": state.epoch,
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "param_groups": [{k: v for k, v in g.items()} for g in groups],
        "bank_size": len(state.bank),
    }
    save_checkpoint(path, tensors, config, meta)


def load_trainer(path) -> tuple[TrainerState, dict]:
    """Rebuild a :class:`TrainerState` that continues bitwise where the saved one stopped."""
    from .trainer import init_state

    ck = load_checkpoint(path)
    c = ck.config
    try:
        enc_cfg = EncoderConfig(**c["encoder"])
        heads = HeadConfig(**c["heads"])
        cfg = TrainConfig(**c["trainer"])
        aug = AugmentationConfig(**c["augmentation"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint is not a trainer checkpoint ({exc})") from None
    s = ck.meta["stats"]
    state = init_state(enc_cfg, heads, cfg, aug, NormalizationStats(s["mean"], s["std"]), seed=ck.meta["seed"])
    net: BYOLNetwork = state.network
    for name in ("online_encoder", "online_projector", "predictor", "target_encoder", "target_projector"):
        _load_module(getattr(net, name), ck.subset(name + "."))
    opt_state: dict = {}
    for key, value in ck.subset("optim.").items():
        idx, field_name = key.split(".", 1)
        opt_state.setdefault(int(idx), {})[field_name] = torch.as_tensor(value)
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": ck.meta["param_groups"]})
    bank = ck.subset("bank.")
    state.bank = MixupMemoryBank(aug.memory_capacity, [bank[k] for k in sorted(bank)])
    state.rng.bit_generator.state = ck.meta["rng"]
    state.epoch = ck.meta["epoch"]
    state.step = ck.meta["step"]
    configs = {"encoder": enc_cfg, "heads": heads, "trainer": cfg, "augmentation": aug, "raw": c}
    if "features.mean" in ck.tensors:
        from .features import FeatureStandardizer

        configs["feature_standardizer"] = FeatureStandardizer(ck.tensors["features.mean"], ck.tensors["features.std"])
    return state, configs
