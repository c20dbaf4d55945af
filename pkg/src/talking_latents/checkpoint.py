"""Deterministic single-file tensor archives for checkpoints.

Archives are ordinary ``.npz`` zip files readable with ``numpy.load``, written
with fixed zip timestamps and sorted member order so that identical contents
give byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import TOOL_VERSION, Config
from .errors import DataError, FingerprintError

META_KEY = "__meta__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    members = dict(arrays)
    members[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(members):
            buf = io.BytesIO()
            array = np.asarray(members[name])
            if not array.flags.c_contiguous:
                array = array.copy(order="C")
            np.lib.format.write_array(buf, array, allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())
    tmp.replace(path)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files if name != META_KEY}
            meta = json.loads(str(archive[META_KEY])) if META_KEY in archive.files else {}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from exc
    return arrays, meta


def state_arrays(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state(prefix: str, module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k[len(prefix) + 1 :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + ".")}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise DataError(f"checkpoint lacks {prefix} tensors: {sorted(missing)[:5]}")
    module.load_state_dict(state)


def check_fingerprint(meta: dict, cfg: Config, force: bool = False) -> None:
    expected = cfg.fingerprint()
    found = meta.get("fingerprint")
    if found != expected and not force:
        raise FingerprintError(f"checkpoint fingerprint {found} does not match config fingerprint {expected}")


def base_meta(kind: str, cfg: Config, seed: int, **extra) -> dict:
    meta = {
        "kind": kind,
        "fingerprint": cfg.fingerprint(),
        "seed": seed,
        "tool_version": TOOL_VERSION,
        "config": cfg.to_dict(),
    }
    meta.update(extra)
    return meta
