"""Dataset manifest: one CSV with header path,person_id,camera_id,split."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .errors import ManifestError

SPLITS = ("pretrain", "train", "query", "gallery")
HEADER = ["path", "person_id", "camera_id", "split"]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    person_id: int
    camera_id: int
    split: str


def load_manifest(csv_path) -> list[ManifestEntry]:
    csv_path = Path(csv_path)
    try:
        text = csv_path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {csv_path}: {e}") from e
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise ManifestError("empty file, expected a header row", line=1)
    if rows[0] != HEADER:
        raise ManifestError(f"bad header {rows[0]!r}, expected {HEADER!r}", line=1)
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ManifestError(f"expected 4 columns, got {len(row)}", line=lineno)
        path, pid_s, cam_s, split = row
        try:
            pid, cam = int(pid_s), int(cam_s)
        except ValueError:
            raise ManifestError(f"non-integer id in {row!r}", line=lineno) from None
        if pid < 0 or cam < 0:
            raise ManifestError(f"negative id in {row!r}", line=lineno)
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}, expected one of {SPLITS}", line=lineno)
        entries.append(ManifestEntry(path, pid, cam, split))
    return entries


def write_manifest(entries: list[ManifestEntry], csv_path) -> None:
    lines = [",".join(HEADER)]
    lines += [f"{e.path},{e.person_id},{e.camera_id},{e.split}" for e in entries]
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_entries(entries: list[ManifestEntry], split: str) -> list[ManifestEntry]:
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}")
    return [e for e in entries if e.split == split]
