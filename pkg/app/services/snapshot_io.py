"""
Run artifacts: binary field snapshots, checkpoint manifests and CSV tables

Everything written here is a pure function of the data handed in, so two
identical runs produce byte-identical directories.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.config import FLOAT_FORMAT
from app.services.errors import BlowUpError, LabError
from app.services.spectral_core import GridSpec, VectorField

logger = logging.getLogger(__name__)

MAGIC = b"TMF1"
HEADER_BYTES = 4 + 4 + 4 + 8
BLOWUP_MARKER = "BLOWUP"
MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def encode_snapshot(field: VectorField, time: float) -> bytes:
    """TMF1 header, then component-major little-endian float64 samples"""
    grid = field.grid
    header = MAGIC + np.array([grid.n, grid.m], dtype="<u4").tobytes() + np.array([time], dtype="<f8").tobytes()
    return header + np.ascontiguousarray(field.components, dtype="<f8").tobytes()


def decode_snapshot(data: bytes) -> Tuple[VectorField, float]:
    if len(data) < HEADER_BYTES or data[:4] != MAGIC:
        raise LabError("not a TMF1 snapshot")
    n, m = (int(v) for v in np.frombuffer(data, dtype="<u4", count=2, offset=4))
    time = float(np.frombuffer(data, dtype="<f8", count=1, offset=12)[0])
    grid = GridSpec(n, m)
    expected = n * m ** n
    samples = np.frombuffer(data, dtype="<f8", offset=HEADER_BYTES)
    if samples.size != expected:
        raise LabError(f"snapshot holds {samples.size} samples, expected {expected} for n={n}, m={m}")
    return VectorField(grid, samples.astype(float).reshape((n,) + grid.shape)), time


def write_snapshot(path, field: VectorField, time: float) -> Path:
    path = Path(path)
    path.write_bytes(encode_snapshot(field, time))
    logger.debug("snapshot %s (t=%.6g)", path.name, time)
    return path


def read_snapshot(path) -> Tuple[VectorField, float]:
    return decode_snapshot(Path(path).read_bytes())


def snapshot_name(label: str, step: int) -> str:
    return f"{label}_{step:06d}.tmf"


# ---------------------------------------------------------------------------
# checkpoint manifest
# ---------------------------------------------------------------------------

class Checkpoint:
    """
    Snapshot files plus a manifest of what produced them

    Entries are kept in write order; the manifest is rewritten after
    every snapshot so that a run stopped by a blow-up leaves a valid one.
    """

    def __init__(self, directory, label: str, header: Dict):
        self.directory = Path(directory)
        self.label = label
        self.header = dict(header)
        self.entries: List[Dict] = []

    def save(self, field: VectorField, step: int, time: float) -> Path:
        name = snapshot_name(self.label, step)
        write_snapshot(self.directory / name, field, time)
        self.entries.append({"file": name, "step": step, "time": time})
        self.write_manifest()
        return self.directory / name

    def write_manifest(self) -> Path:
        payload = dict(self.header)
        payload["snapshots"] = self.entries
        return write_manifest(self.directory, payload)


def write_manifest(directory, payload: Dict) -> Path:
    path = Path(directory) / MANIFEST_NAME
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def read_manifest(directory) -> Dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise LabError(f"no manifest in {directory}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def write_csv(frame: pd.DataFrame, path, columns: Optional[Sequence[str]] = None) -> Path:
    """Fixed column order and 17 significant digits"""
    path = Path(path)
    if columns is not None:
        frame = frame.reindex(columns=list(columns))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def blowup_row(error: BlowUpError, columns: Sequence[str]) -> Dict:
    """Marker row: BLOWUP, time, step, reason, padded to the table width"""
    values = [BLOWUP_MARKER, FLOAT_FORMAT % error.time, str(error.step), error.reason]
    values = values[:len(columns)] + [""] * max(0, len(columns) - len(values))
    return dict(zip(columns, values))


def write_csv_with_blowup(rows: List[Dict], path, columns: Sequence[str], error: BlowUpError) -> Path:
    """Partial table followed by the BLOWUP marker row"""
    frame = pd.DataFrame(rows, columns=list(columns))
    write_csv(frame, path, columns)
    marker = pd.DataFrame([blowup_row(error, columns)], columns=list(columns))
    with open(path, "a") as handle:
        marker.to_csv(handle, index=False, header=False, lineterminator="\n")
    logger.warning("%s: %s", Path(path).name, error)
    return Path(path)


def has_blowup_marker(path) -> bool:
    frame = pd.read_csv(path, comment="#", dtype=str)
    return bool(len(frame)) and frame.iloc[-1, 0] == BLOWUP_MARKER


def write_basis_audit(frame: pd.DataFrame, path) -> Path:
    """Audit table with a trailing `# summary` comment line carrying c_K and ε_K"""
    path = write_csv(frame, path)
    summary = "# summary c_K={} epsilon_K={}\n".format(
        FLOAT_FORMAT % frame.attrs["c_K"], FLOAT_FORMAT % frame.attrs["epsilon_K"])
    with open(path, "a") as handle:
        handle.write(summary)
    return path


def read_basis_summary(path) -> Dict[str, float]:
    for line in Path(path).read_text().splitlines():
        if line.startswith("# summary"):
            pairs = (item.split("=") for item in line[len("# summary"):].split())
            return {key: float(value) for key, value in pairs}
    raise LabError(f"{path} has no summary line")
