"""Single-file model archives: parameter tensors keyed by module path plus a manifest."""
from __future__ import annotations

import pickle
import zipfile
from pathlib import Path

import torch

from . import CONVENTION_VERSION
from .errors import CorruptFileError, VersionError


def save_checkpoint(path, modules: dict, manifest: dict) -> Path:
    """``modules`` maps a name to an ``nn.Module``; keys become ``name.param.path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {}
    for name, module in modules.items():
        for key, value in module.state_dict().items():
            state[f"{name}.{key}"] = value.detach().cpu()
    torch.save({"manifest": {**manifest, "convention": CONVENTION_VERSION}, "state": state}, path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ``(manifest, state)``; rejects archives from another convention version."""
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile) as exc:
        raise CorruptFileError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "manifest" not in blob or "state" not in blob:
        raise CorruptFileError(f"checkpoint {path} lacks a manifest or state")
    manifest = blob["manifest"]
    if manifest.get("convention") != CONVENTION_VERSION:
        raise VersionError(
            f"checkpoint {path} uses convention {manifest.get('convention')!r}, expected {CONVENTION_VERSION!r}"
        )
    return manifest, blob["state"]


def restore(module, state: dict, name: str) -> None:
    prefix = name + "."
    module.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})
