"""Feature matrices and CSV ingestion of externally computed features."""

from dataclasses import dataclass

import numpy as np


class FeatureError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # (N, d) float64
    labels: list      # N class identifiers
    source: str       # cnn | ingested | adapted

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise FeatureError(f"rows must be 2-D, got shape {self.rows.shape}")
        if not np.isfinite(self.rows).all():
            raise FeatureError("feature entries must be finite")
        if len(self.labels) != self.rows.shape[0]:
            raise FeatureError(
                f"{len(self.labels)} labels for {self.rows.shape[0]} feature rows")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def ingest_features(path) -> FeatureMatrix:
    """Parse a feature CSV with header `label,f0,..,f{d-1}`."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines:
        raise FeatureError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != "label" or len(header) < 2:
        raise FeatureError(f"{path}: header must be 'label,f0,..'")
    d = len(header) - 1
    if not lines[1:]:
        raise FeatureError(f"{path}: no rows")
    labels, rows = [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != d + 1:
            raise FeatureError(f"{path}:{lineno}: expected {d + 1} fields, got {len(parts)}")
        labels.append(parts[0])
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FeatureError(f"{path}:{lineno}: non-numeric cell") from exc
    return FeatureMatrix(rows=np.array(rows), labels=labels, source="ingested")


def write_features(fm: FeatureMatrix, path) -> None:
    with open(path, "w") as f:
        f.write("label," + ",".join(f"f{i}" for i in range(fm.dim)) + "\n")
        for label, row in zip(fm.labels, fm.rows):
            f.write(label + "," + ",".join(repr(float(v)) for v in row) + "\n")
