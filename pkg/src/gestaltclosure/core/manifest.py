"""
Run manifests: one `manifest.json` per output directory recording the resolved
configuration, seeds, input hashes and the files a command wrote.
"""

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar

import structlog
from pydantic import BaseModel, Field, ValidationError

from .. import __version__
from ..config.settings import load_config_file
from .errors import ConfigError, OutputExistsError

logger = structlog.get_logger(__name__)

MANIFEST_NAME = "manifest.json"

ModelT = TypeVar("ModelT", bound=BaseModel)


class RunManifest(BaseModel):
    tool: str = "gestaltclosure"
    version: str = __version__
    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    finished_at: Optional[datetime] = None

    def finish(self, out_dir: Path) -> Path:
        self.outputs = collect_outputs(out_dir)
        self.finished_at = datetime.now(timezone.utc)
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info("manifest_written", path=str(path), outputs=len(self.outputs))
        return path

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        except (OSError, ValidationError) as e:
            raise ConfigError(f"Cannot read run manifest {path}: {e}") from e


def hash_file(path: Path) -> str:
    """SHA-256 of a file, or of every file below a directory in sorted order."""
    path = Path(path)
    digest = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            digest.update(f.relative_to(path).as_posix().encode("utf-8"))
        with open(f, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                digest.update(block)
    return digest.hexdigest()


def collect_outputs(out_dir: Path) -> List[str]:
    out_dir = Path(out_dir)
    return sorted(
        p.relative_to(out_dir).as_posix()
        for p in out_dir.rglob("*")
        if p.is_file() and p.name != MANIFEST_NAME
    )


def prepare_output_dir(out_dir: Path, force: bool = False) -> Path:
    """Create `out_dir`; refuse a non-empty one unless `force`.

    With `force`, files listed by a previous manifest are removed first so the new manifest
    only lists what this run writes.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise OutputExistsError(f"Output directory {out_dir} is not empty (use --force)")
        previous = out_dir / MANIFEST_NAME
        if previous.exists():
            for rel in RunManifest.read(previous).outputs:
                (out_dir / rel).unlink(missing_ok=True)
            previous.unlink()
        logger.warning("output_overwritten", out_dir=str(out_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def is_manifest(path: Path) -> bool:
    path = Path(path)
    if path.suffix.lower() != ".json" or not path.is_file():
        return False
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    return isinstance(data, dict) and data.get("tool") == "gestaltclosure" and "config" in data


def read_recorded(path: Optional[Path]) -> Optional[RunManifest]:
    """The run manifest at `path`, or None when `path` is a plain config file."""
    if path is None or not is_manifest(path):
        return None
    return RunManifest.read(path)


def load_run_config(path: Path, model: Type[ModelT], section: Optional[str] = None) -> ModelT:
    """Load a configuration file, or the configuration recorded in a run manifest.

    With `section`, a manifest whose config nests that key supplies only that part.
    """
    manifest = read_recorded(path)
    if manifest is None:
        return load_config_file(path, model)
    data = manifest.config
    if section is not None and isinstance(data.get(section), dict):
        data = data[section]
    try:
        return model.model_validate(data)
    except ValidationError as e:
        paths = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
        raise ConfigError(f"Manifest {path} does not hold a valid {model.__name__}: {e}", paths) from e
