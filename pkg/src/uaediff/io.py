"""Configuration, image files and run-directory bookkeeping."""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
import platform
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np
import torch
from PIL import Image

from . import __version__
from .errors import IngestionError, ParameterError

RUN_DIR_ENV = "SCOREADV_RUN_DIR"

# Defaults for a 1000-step schedule.  Desk-scale runs override the schedule and window via a config file.
DEFAULTS: Dict[str, Dict[str, Any]] = {
    "run": {"seed": 0, "tag": "run", "root": "runs", "workers": 1, "batch_size": 50, "threads": 1},
    "data": {"manifest": "data/toyshapes/manifest.json", "train_per_class": 500, "test_per_class": 100},
    "models": {"dir": "models"},
    "train": {"diffusion_steps": 6000, "diffusion_channels": 16, "diffusion_lr": 2e-3, "diffusion_prediction": "v",
              "class_dropout_rate": 0.1,
              "classifier_epochs": 6, "embedder_epochs": 6, "min_accuracy": 0.85, "min_verification": 0.9,
              "gate_samples": 200, "embedder": True},
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "sigma_mode": "posterior"},
    "guidance": {"T_star": 500, "N": 3, "s_a": 0.3, "s_c": 1.0, "s_n": 0.8},
    "attack": {"mode": "classification", "surrogate": "cnn_a", "n_attacks": 200, "grad_at": "sample",
               "x0_source": "pre_step", "chain_rule": False, "fusion_order": "guide_then_fuse",
               "surrogate_loss": "cosine", "kappa": 10.0, "tau": 0.7, "early_stop": False,
               "reference": False, "reference_path": "", "saliency_method": "scorecam",
               "saliency_layer": "features.block3", "saliency_model": "cnn_a", "combine_at": "feature",
               "quality_baseline": True},
    "evaluate": {"targets": "cnn_a,cnn_b", "fid_model": "cnn_a"},
    "sweep": {"param": "s_a", "grid": "0,0.1,0.3,1.0"},
}


def _coerce(value: str, like: Any):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ParameterError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        try:
            f = float(value)
        except ValueError as exc:
            raise ParameterError(f"expected an integer, got {value!r}") from exc
        if not f.is_integer():
            raise ParameterError(f"expected an integer, got {value!r}")
        return int(f)
    if isinstance(like, float):
        try:
            return float(value)
        except ValueError as exc:
            raise ParameterError(f"expected a number, got {value!r}") from exc
    return value.strip()


@dataclass
class RunConfig:
    """Resolved configuration: nested ``section -> key -> value`` plus the directory relative paths resolve against."""

    values: Dict[str, Dict[str, Any]]
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, raw):
        if section not in self.values or key not in self.values[section]:
            raise ParameterError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(str(raw), DEFAULTS[section][key])

    def path(self, section: str, key: str) -> Path:
        p = Path(os.path.expanduser(str(self.get(section, key))))
        return p if p.is_absolute() else (self.base_dir / p)

    def snapshot(self) -> Dict[str, Dict[str, Any]]:
        return json.loads(json.dumps(self.values))

    def copy(self) -> "RunConfig":
        return RunConfig(self.snapshot(), self.base_dir)


def default_config(base_dir=None) -> RunConfig:
    return RunConfig(json.loads(json.dumps(DEFAULTS)), Path(base_dir) if base_dir else Path.cwd())


def load_config(path, overrides: Iterable[str] = ()) -> RunConfig:
    """Read an INI config or a run ``manifest.json``; ``overrides`` are ``section.key=value`` strings.

    Relative paths in an INI file resolve against the file's directory; a
    manifest carries the base directory of the run that wrote it.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"config file not found: {path}")
    if path.suffix == ".json":
        try:
            manifest = json.loads(path.read_text())
            snap = manifest["config_snapshot"]
            cfg = RunConfig(json.loads(json.dumps(DEFAULTS)), Path(snap.get("base_dir", path.parent)))
            for section, items in snap["config"].items():
                for key, value in items.items():
                    cfg.set(section, key, value)
        except (KeyError, ValueError) as exc:
            raise ParameterError(f"{path} is not a run manifest: {exc}") from exc
    else:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case (T, T_star, N)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ParameterError(f"cannot parse {path}: {exc}") from exc
        cfg = RunConfig(json.loads(json.dumps(DEFAULTS)), path.parent.resolve())
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    for item in overrides:
        m = re.fullmatch(r"\s*([A-Za-z_]+)\.([A-Za-z_]+)\s*=(.*)", item)
        if not m:
            raise ParameterError(f"override must look like section.key=value, got {item!r}")
        cfg.set(m.group(1), m.group(2), m.group(3))
    return cfg


# -- images ---------------------------------------------------------------------

def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Pixel-range ``[C,H,W]`` (or ``[H,W]``) -> uint8 ``[H,W,C]`` via ``floor(255 x + 0.5)``."""
    arr = torch.as_tensor(x).detach().cpu().to(torch.float64).clamp(0.0, 1.0).numpy()
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    return np.transpose(q, (1, 2, 0)) if q.ndim == 3 else q


def write_png(path, x: torch.Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(x)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG", optimize=False)
    return path


def read_png(path) -> torch.Tensor:
    """PNG -> float32 pixel-range tensor ``[C,H,W]`` (grayscale files give ``C=1``)."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except OSError as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return torch.from_numpy(np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))).float() / 255.0


# -- run directory --------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def runs_root(cfg: Optional[RunConfig] = None) -> Path:
    env = os.environ.get(RUN_DIR_ENV)
    if env:
        return Path(env)
    return cfg.path("run", "root") if cfg is not None else Path("runs")


def new_run_dir(cfg: RunConfig, tag: Optional[str] = None, parent: Optional[Path] = None) -> Path:
    root = Path(parent) if parent is not None else runs_root(cfg)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    safe = re.sub(r"[^A-Za-z0-9_.=-]+", "_", tag or str(cfg.get("run", "tag")))
    base = root / f"{stamp}-{safe}"
    run, k = base, 1
    while run.exists():
        run = Path(f"{base}-{k}")
        k += 1
    for sub in ("images", "masks", "records", "plots"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    return run


def json_dumps(obj) -> str:
    """Stable JSON: sorted keys, non-finite floats written as strings."""
    def clean(o):
        if isinstance(o, float):
            if math.isnan(o):
                return "nan"
            if math.isinf(o):
                return "inf" if o > 0 else "-inf"
            return o
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (np.floating,)):
            return clean(float(o))
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.bool_,)):
            return bool(o)
        return o
    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json_dumps(obj))
    return path


def inventory(run_dir: Path) -> Dict[str, str]:
    """``relative path -> sha256`` for every file in the run directory except the manifest."""
    run_dir = Path(run_dir)
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.startswith("."):
            out[p.relative_to(run_dir).as_posix()] = sha256_file(p)
    return out


def write_manifest(run_dir: Path, cfg: RunConfig, command: str, extra: Optional[dict] = None,
                   started: Optional[str] = None) -> Path:
    run_dir = Path(run_dir)
    path = run_dir / "manifest.json"
    previous = json.loads(path.read_text()) if path.is_file() else {}
    manifest = {
        "tool": "uaediff",
        "tool_version": __version__,
        "command": command,
        "seed": int(cfg.get("run", "seed")),
        "config_snapshot": {"config": cfg.snapshot(), "base_dir": str(cfg.base_dir)},
        "platform": {"python": platform.python_version(), "torch": torch.__version__,
                     "threads": torch.get_num_threads()},
        "timestamps": {"started": started or previous.get("timestamps", {}).get("started") or _now(),
                       "finished": _now()},
    }
    merged = dict(previous.get("details", {}))
    merged.update(extra or {})
    manifest["details"] = merged
    manifest["inventory"] = inventory(run_dir)
    write_json(path, manifest)
    return path


def update_manifest(run_dir: Path, details: dict) -> Path:
    """Merge ``details`` into an existing manifest and refresh its inventory."""
    path = Path(run_dir) / "manifest.json"
    manifest = read_manifest(run_dir)
    manifest.setdefault("details", {}).update(details)
    manifest.setdefault("timestamps", {})["updated"] = _now()
    manifest["inventory"] = inventory(Path(run_dir))
    write_json(path, manifest)
    return path


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json" if Path(run_dir).is_dir() else Path(run_dir)
    if not path.is_file():
        raise IngestionError(f"no manifest at {path}")
    return json.loads(path.read_text())


def verify_inventory(run_dir) -> list:
    """Files whose hash differs from (or are missing versus) the manifest inventory."""
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    bad = []
    for rel, digest in manifest["inventory"].items():
        p = run_dir / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
