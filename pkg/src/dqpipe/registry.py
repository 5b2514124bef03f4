"""File-backed versioned artifact store plus append-only event log.

Layout under the registry root:

    store/<kind>/<version>/payload   opaque artifact bytes
    store/<kind>/<version>/meta.json provenance metadata
    events.jsonl                     append-only JSON-lines event log
    .writer.lock                     single-writer exclusion

Versions per kind are dense integers starting at 1. Writes are staged in a
temp directory and renamed into place so readers only ever see committed
versions.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .datamodel import ArtifactKind, VersionedArtifact
from .errors import NotFound, StorageFailure, WriterLockHeld


def _kind_str(kind: ArtifactKind | str) -> str:
    return kind.value if isinstance(kind, ArtifactKind) else str(kind)


class Registry:
    """Single-writer, multi-reader artifact store rooted at a directory."""

    def __init__(self, root: str | Path, writer: bool = True):
        self.root = Path(root)
        self.store = self.root / "store"
        self.events_path = self.root / "events.jsonl"
        self._lock_path = self.root / ".writer.lock"
        self._lock_fd: int | None = None
        self._events_fh = None
        self.writer = writer
        self.store.mkdir(parents=True, exist_ok=True)
        if writer:
            self._acquire_lock()

    def _acquire_lock(self) -> None:
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WriterLockHeld(
                f"another writer holds {self._lock_path}"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        self._lock_fd = fd

    def close(self) -> None:
        if self._events_fh is not None:
            self._events_fh.close()
            self._events_fh = None
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_path.unlink(missing_ok=True)
            self._lock_fd = None

    def __enter__(self) -> "Registry":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- artifacts ---------------------------------------------------------

    def _kind_dir(self, kind: ArtifactKind | str) -> Path:
        return self.store / _kind_str(kind)

    def list_versions(self, kind: ArtifactKind | str) -> list[int]:
        kd = self._kind_dir(kind)
        if not kd.is_dir():
            return []
        return sorted(int(p.name) for p in kd.iterdir() if p.name.isdigit())

    def put_artifact(self, kind: ArtifactKind | str, payload: bytes, meta: dict) -> int:
        if self._lock_fd is None:
            raise StorageFailure("registry opened read-only")
        if not payload:
            raise StorageFailure("artifact payload must be non-empty")
        kd = self._kind_dir(kind)
        kd.mkdir(parents=True, exist_ok=True)
        versions = self.list_versions(kind)
        version = (versions[-1] + 1) if versions else 1
        tmp = kd / f".tmp-{version}"
        final = kd / str(version)
        try:
            tmp.mkdir()
            (tmp / "payload").write_bytes(payload)
            (tmp / "meta.json").write_text(json.dumps(meta, sort_keys=True))
            os.replace(tmp, final)
        except OSError as e:
            raise StorageFailure(f"failed to persist {_kind_str(kind)} v{version}: {e}") from e
        return version

    def get(self, kind: ArtifactKind | str, version: int) -> VersionedArtifact:
        vd = self._kind_dir(kind) / str(version)
        if not vd.is_dir():
            raise NotFound(f"{_kind_str(kind)} version {version} not found")
        try:
            payload = (vd / "payload").read_bytes()
            meta = json.loads((vd / "meta.json").read_text())
        except OSError as e:
            raise StorageFailure(str(e)) from e
        return VersionedArtifact(
            kind=ArtifactKind(_kind_str(kind)), version=version, payload=payload, meta=meta
        )

    def get_latest(self, kind: ArtifactKind | str) -> VersionedArtifact:
        versions = self.list_versions(kind)
        if not versions:
            raise NotFound(f"no versions of {_kind_str(kind)}")
        return self.get(kind, versions[-1])

    # -- event log ----------------------------------------------------------

    def log_event(self, record: dict) -> None:
        if self._events_fh is None:
            try:
                self._events_fh = open(self.events_path, "a")
            except OSError as e:
                raise StorageFailure(str(e)) from e
        self._events_fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._events_fh.flush()

    def read_events(self) -> Iterator[dict]:
        if not self.events_path.exists():
            return
        with open(self.events_path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)


# ---------------------------------------------------------------------------
# Event-log audit: replay the log and check version/deployment coherence
# ---------------------------------------------------------------------------

ALL_KINDS = tuple(k.value for k in ArtifactKind)


@dataclass
class AuditReport:
    ok: bool
    n_predictions: int
    n_adaptations: int
    issues: list[str] = field(default_factory=list)


def verify_audit_trail(registry: Registry) -> AuditReport:
    """Replay the event log and reconstruct every version transition.

    Checks that registry versions per kind are gapless, that every
    adaptation bumps all kinds by exactly one under a single deployment id,
    and that every prediction names the versions of its deployment.
    """
    issues: list[str] = []
    for kind in ALL_KINDS:
        versions = registry.list_versions(kind)
        if versions and versions != list(range(1, len(versions) + 1)):
            issues.append(f"{kind}: versions {versions} are not gapless from 1")

    current: dict[str, int] = {}
    deployment = None
    n_pred = 0
    n_adapt = 0
    for i, ev in enumerate(registry.read_events()):
        etype = ev.get("type")
        if etype == "init":
            current = dict(ev["versions"])
            deployment = ev["deployment_id"]
            if any(v != 1 for v in current.values()):
                issues.append(f"event {i}: init versions are not all 1: {current}")
        elif etype == "adaptation":
            n_adapt += 1
            new_versions = dict(ev["versions"])
            for kind in ALL_KINDS:
                if new_versions.get(kind) != current.get(kind, 0) + 1:
                    issues.append(
                        f"event {i}: adaptation did not bump {kind} by one "
                        f"({current.get(kind)} -> {new_versions.get(kind)})"
                    )
            if ev["deployment_id"] != (deployment or 0) + 1:
                issues.append(
                    f"event {i}: deployment id {ev['deployment_id']} does not "
                    f"follow {deployment}"
                )
            current = new_versions
            deployment = ev["deployment_id"]
        elif etype == "prediction":
            n_pred += 1
            if dict(ev["versions"]) != current:
                issues.append(f"event {i}: prediction versions {ev['versions']} != {current}")
            if ev["deployment_id"] != deployment:
                issues.append(
                    f"event {i}: prediction deployment {ev['deployment_id']} != {deployment}"
                )
    # the final replayed state must match the registry contents
    for kind in ALL_KINDS:
        versions = registry.list_versions(kind)
        if versions and current.get(kind) != versions[-1]:
            issues.append(
                f"{kind}: replay ends at v{current.get(kind)} but registry holds v{versions[-1]}"
            )
    return AuditReport(ok=not issues, n_predictions=n_pred, n_adaptations=n_adapt, issues=issues)


def now_iso() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
