"""
Self-describing checkpoint files: one uncompressed .npz holding a JSON header plus every
parameter, RMSProp accumulator and the feature-normalization statistics.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import structlog

from ..config.settings import NetConfig
from .datasets import FeatureNormalization
from .errors import ArchitectureMismatchError, GestaltClosureError
from .network import Network, Params, RMSPropState, build_network

logger = structlog.get_logger(__name__)

FORMAT_VERSION = 1
_HEADER = "__header__"


@dataclass
class Checkpoint:
    config: NetConfig
    seed: int
    epoch: int
    params: Params
    optimizer: Optional[RMSPropState] = None
    normalization: Optional[FeatureNormalization] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_network(
        cls,
        net: Network,
        epoch: int,
        optimizer: Optional[RMSPropState] = None,
        normalization: Optional[FeatureNormalization] = None,
        **metadata: Any,
    ) -> "Checkpoint":
        state = None
        if optimizer is not None:
            state = RMSPropState(
                accumulators={k: v.copy() for k, v in optimizer.accumulators.items()},
                rho=optimizer.rho,
                epsilon=optimizer.epsilon,
                steps=optimizer.steps,
            )
        return cls(
            config=net.config,
            seed=net.seed,
            epoch=epoch,
            params=net.copy_parameters(),
            optimizer=state,
            normalization=normalization,
            metadata=dict(metadata),
        )

    def restore(self, debug: bool = False) -> Network:
        net = build_network(self.config, self.seed, debug=debug)
        net.set_parameters(self.params)
        return net

    def load_into(self, net: Network) -> None:
        if net.config != self.config:
            raise ArchitectureMismatchError(
                "checkpoint architecture does not match the network "
                f"({self.config.model_dump_json()} vs {net.config.model_dump_json()})"
            )
        net.set_parameters(self.params)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "config": checkpoint.config.model_dump(mode="json"),
        "seed": checkpoint.seed,
        "epoch": checkpoint.epoch,
        "metadata": checkpoint.metadata,
        "optimizer": None,
    }
    arrays: Dict[str, np.ndarray] = {f"param/{k}": v for k, v in checkpoint.params.items()}
    if checkpoint.optimizer is not None:
        header["optimizer"] = {
            "rho": checkpoint.optimizer.rho,
            "epsilon": checkpoint.optimizer.epsilon,
            "steps": checkpoint.optimizer.steps,
        }
        arrays.update({f"opt/{k}": v for k, v in checkpoint.optimizer.accumulators.items()})
    if checkpoint.normalization is not None:
        arrays["norm/mean"] = checkpoint.normalization.mean
        arrays["norm/std"] = checkpoint.normalization.std
    arrays[_HEADER] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), np.uint8)

    try:
        with open(path, "wb") as f:
            np.savez(f, **arrays)
    except OSError as e:
        raise OSError(f"Failed to write checkpoint {path}: {e}") from e
    logger.debug("checkpoint_saved", path=str(path), epoch=checkpoint.epoch)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise GestaltClosureError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data[_HEADER]).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise GestaltClosureError(f"Unsupported checkpoint format in {path}")
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        optimizer = None
        if header["optimizer"] is not None:
            optimizer = RMSPropState(
                accumulators={k[len("opt/"):]: data[k] for k in data.files if k.startswith("opt/")},
                **header["optimizer"],
            )
        normalization = None
        if "norm/mean" in data.files:
            normalization = FeatureNormalization(mean=data["norm/mean"], std=data["norm/std"])
    return Checkpoint(
        config=NetConfig.model_validate(header["config"]),
        seed=header["seed"],
        epoch=header["epoch"],
        params=params,
        optimizer=optimizer,
        normalization=normalization,
        metadata=header.get("metadata", {}),
    )
