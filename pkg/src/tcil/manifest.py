"""Run manifest: what a run directory contains and how far it got."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import IntegrityError, ResumeError, StateError

RUN_MANIFEST = "run_manifest.json"


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    dataset: dict
    protocol: str
    num_steps: int
    seed: int
    completed_steps: list[int] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)

    def __setattr__(self, name, value):
        if name == "config_hash" and "config_hash" in self.__dict__ and value != self.config_hash:
            raise StateError("config hash is fixed once the manifest exists")
        super().__setattr__(name, value)

    @property
    def last_completed(self) -> int:
        return self.completed_steps[-1] if self.completed_steps else 0

    def mark_complete(self, step: int, artifacts: dict[str, str] | None = None) -> None:
        if step != self.last_completed + 1:
            raise StateError(f"step {step} completed out of order (last completed {self.last_completed})")
        self.completed_steps.append(step)
        if artifacts:
            self.artifacts.update(artifacts)

    @property
    def finished(self) -> bool:
        return self.last_completed == self.num_steps

    def save(self, out_dir: str | Path) -> None:
        path = Path(out_dir) / RUN_MANIFEST
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        tmp.replace(path)

    @classmethod
    def load(cls, out_dir: str | Path) -> "RunManifest":
        path = Path(out_dir) / RUN_MANIFEST
        if not path.exists():
            raise ResumeError(f"no {RUN_MANIFEST} in {out_dir}; nothing to resume")
        try:
            payload = json.loads(path.read_text())
            manifest = cls(**payload)
        except (json.JSONDecodeError, TypeError) as exc:
            raise IntegrityError(f"{path}: corrupt run manifest: {exc}") from None
        if manifest.completed_steps != list(range(1, len(manifest.completed_steps) + 1)):
            raise IntegrityError(f"{path}: completion markers are not sequential")
        return manifest
