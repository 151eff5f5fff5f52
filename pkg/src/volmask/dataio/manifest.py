from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

LABELS = ("CN", "AD")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
REQUIRED_COLUMNS = ("participant_id", "session_id", "label", "path")
OPTIONAL_COLUMNS = ("age", "sex")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    participant_id: str
    session_id: str
    label: str
    path: str
    age: float | None = None
    sex: str | None = None

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]


@dataclass
class CohortManifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for i, row in enumerate(self.rows):
            if row.label not in LABEL_INDEX:
                raise ManifestError(f"row {i + 1}: unknown label {row.label!r} (expected one of {LABELS})")
            key = (row.participant_id, row.session_id)
            if key in seen:
                raise ManifestError(f"row {i + 1}: duplicate session {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def subjects(self) -> dict[str, str]:
        """participant_id -> label; a subject must keep one label across sessions."""
        out: dict[str, str] = {}
        for row in self.rows:
            prev = out.setdefault(row.participant_id, row.label)
            if prev != row.label:
                raise ManifestError(f"subject {row.participant_id} has conflicting labels {prev} and {row.label}")
        return out

    def sessions_of(self, participant_id: str) -> list[ManifestRow]:
        return sorted((r for r in self.rows if r.participant_id == participant_id), key=lambda r: r.session_id)

    def baseline(self, participant_id: str) -> ManifestRow:
        """First session in lexical session order."""
        return self.sessions_of(participant_id)[0]

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p


def parse_manifest(path) -> CohortManifest:
    """Read a tab-separated manifest with a header row."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        columns = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in columns]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for rec in reader:
            age = rec.get("age") or None
            rows.append(
                ManifestRow(
                    participant_id=rec["participant_id"],
                    session_id=rec["session_id"],
                    label=rec["label"],
                    path=rec["path"],
                    age=float(age) if age is not None else None,
                    sex=rec.get("sex") or None,
                )
            )
    return CohortManifest(rows, root=path.parent)


def write_manifest(manifest: CohortManifest, path) -> None:
    path = Path(path)
    extra = [c for c in OPTIONAL_COLUMNS if any(getattr(r, c) is not None for r in manifest.rows)]
    columns = list(REQUIRED_COLUMNS) + extra
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(columns)
        for r in manifest.rows:
            writer.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in columns])
