"""Model checkpoints: a zip of named ``.npy`` blocks plus a JSON header.

Entries carry a fixed timestamp so the same parameters always produce the same
bytes. Loading checks the format version, the catalog hash and ``d``.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from relisten.config import ConfigError, RunConfig, parse_config_text
from relisten.embed import DTYPE
from relisten.model import SessionModel
from relisten.training import AdamState

FORMAT = "relisten-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ConfigError):
    pass


@dataclass
class Checkpoint:
    model: SessionModel
    catalog_hash: str
    epoch: int = 0
    adam: AdamState | None = None


def _npy(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def _put(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    model = ckpt.model
    header = {
        "format": FORMAT,
        "version": VERSION,
        "catalog_hash": ckpt.catalog_hash,
        "d": model.config.d,
        "n_songs": model.n_songs,
        "trainable_songs": model.trainable_songs,
        "epoch": ckpt.epoch,
        "blocks": list(model.params),
        "adam_step": None if ckpt.adam is None else ckpt.adam.step,
        "config": model.config.to_text(),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _put(zf, "header.json", (json.dumps(header, indent=1, sort_keys=True) + "\n").encode())
        for name, tensor in model.params.items():
            _put(zf, f"params/{name}.npy", _npy(tensor.detach().numpy()))
        if ckpt.adam is not None:
            for name in sorted(ckpt.adam.m):
                _put(zf, f"adam_m/{name}.npy", _npy(ckpt.adam.m[name].numpy()))
                _put(zf, f"adam_v/{name}.npy", _npy(ckpt.adam.v[name].numpy()))
    return path


def _read(zf: zipfile.ZipFile, name: str) -> torch.Tensor:
    with zf.open(name) as fh:
        return torch.from_numpy(np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)).to(DTYPE)


def load_checkpoint(path: str | Path, catalog_hash: str | None = None, d: int | None = None) -> Checkpoint:
    """Read a checkpoint; a mismatching ``catalog_hash`` or ``d`` raises CheckpointError."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    with zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing header") from exc
        if header.get("format") != FORMAT or header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported format {header.get('format')} v{header.get('version')}")
        if catalog_hash is not None and header["catalog_hash"] != catalog_hash:
            raise CheckpointError(f"{path}: trained on a different song catalog")
        if d is not None and header["d"] != d:
            raise CheckpointError(f"{path}: d={header['d']} does not match d={d}")
        config = RunConfig.from_dict(parse_config_text(header["config"]))
        params = {name: _read(zf, f"params/{name}.npy") for name in header["blocks"]}
        adam = None
        if header["adam_step"] is not None:
            names = sorted(n[len("adam_m/"):-4] for n in zf.namelist() if n.startswith("adam_m/"))
            adam = AdamState(
                m={n: _read(zf, f"adam_m/{n}.npy") for n in names},
                v={n: _read(zf, f"adam_v/{n}.npy") for n in names},
                step=header["adam_step"],
            )
    model = SessionModel(params, config, trainable_songs=header["trainable_songs"])
    return Checkpoint(model, header["catalog_hash"], header["epoch"], adam)
