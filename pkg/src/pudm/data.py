"""Synthetic 2-D datasets with analytic normal/sensitive labels and PU splits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

NORMAL, SENSITIVE = 0, 1


class Kind(str, Enum):
    TWO_GAUSSIANS = "two_gaussians"
    TWO_MOONS = "two_moons"
    CHECKERBOARD = "checkerboard"


@dataclass(frozen=True)
class Geometry:
    """Shape parameters shared by the generators and the oracle classifier.

    ``separation`` puts the Gaussian centers at ``(-separation, 0)`` (normal)
    and ``(+separation, 0)`` (sensitive) with per-axis std ``std``.
    """

    separation: float = 2.0
    std: float = 0.5
    moon_noise: float = 0.05
    cell: float = 1.0
    board: int = 4

    def validate(self) -> None:
        if self.separation <= 0 or self.std <= 0 or self.moon_noise < 0:
            raise ValueError(f"invalid geometry {self}")
        if self.cell <= 0 or self.board < 2 or self.board % 2:
            raise ValueError("checkerboard needs cell > 0 and an even board size >= 2")


class DataFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


# -- analytic membership ----------------------------------------------------

# Moon arcs: centers and angular ranges, after shifting the usual
# construction so the pair is centered at the origin.
_MOON_CENTERS = (np.array([-0.5, -0.25]), np.array([0.5, 0.25]))
_MOON_ARCS = ((0.0, np.pi), (np.pi, 2 * np.pi))


def _arc_distance(points: np.ndarray, center, lo: float, hi: float) -> np.ndarray:
    rel = points - center
    r = np.hypot(rel[:, 0], rel[:, 1])
    ang = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2 * np.pi)
    on_arc = (ang >= lo) & (ang <= hi)
    ends = [center + np.array([np.cos(a), np.sin(a)]) for a in (lo, hi)]
    to_ends = np.minimum(*(np.linalg.norm(points - e, axis=1) for e in ends))
    return np.where(on_arc, np.abs(r - 1.0), to_ends)


def membership(points, kind: Kind, geometry: Geometry) -> np.ndarray:
    """Label points 0 (normal) or 1 (sensitive) by the kind's region rule."""
    kind = Kind(kind)
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if kind is Kind.TWO_GAUSSIANS:
        # nearest of the two centers on the first axis
        return (p[:, 0] > 0).astype(np.int64)
    if kind is Kind.TWO_MOONS:
        d0 = _arc_distance(p, _MOON_CENTERS[0], *_MOON_ARCS[0])
        d1 = _arc_distance(p, _MOON_CENTERS[1], *_MOON_ARCS[1])
        return (d1 < d0).astype(np.int64)
    cells = np.floor(p / geometry.cell).astype(np.int64)
    return np.mod(cells[:, 0] + cells[:, 1], 2)


# -- generation -------------------------------------------------------------


@dataclass
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    kind: Kind
    seed: int
    geometry: Geometry = field(default_factory=Geometry)

    def __len__(self) -> int:
        return self.labels.size


def _draw(kind: Kind, label: int, n: int, rng: np.random.Generator, g: Geometry) -> np.ndarray:
    if kind is Kind.TWO_GAUSSIANS:
        center = np.array([g.separation if label else -g.separation, 0.0])
        return center + g.std * rng.standard_normal((n, 2))
    if kind is Kind.TWO_MOONS:
        theta = rng.uniform(0.0, np.pi, n) + (np.pi if label else 0.0)
        arc = _MOON_CENTERS[label] + np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return arc + g.moon_noise * rng.standard_normal((n, 2))
    half = g.board // 2
    cells = rng.integers(-half, half, size=(n, 2))
    # move to the matching colour along the first axis, wrapping inside the board
    wrong = np.mod(cells.sum(axis=1), 2) != label
    cells[wrong, 0] = np.where(cells[wrong, 0] + 1 < half, cells[wrong, 0] + 1, -half)
    return (cells + rng.uniform(0.0, 1.0, (n, 2))) * g.cell


def generate(kind, n: int, seed: int, geometry: Geometry | None = None) -> LabeledDataset:
    """Balanced labeled sample; every point satisfies its kind's membership rule.

    Draws that fall on the wrong side of the analytic boundary (Gaussian or
    moon noise tails) are redrawn, so labels are consistent by construction.
    """
    kind = Kind(kind)
    geometry = geometry or Geometry()
    geometry.validate()
    if n < 2:
        raise ValueError("need at least two points")
    rng = np.random.default_rng(seed)
    counts = {NORMAL: n - n // 2, SENSITIVE: n // 2}
    chunks, labels = [], []
    for label, count in counts.items():
        pts = _draw(kind, label, count, rng, geometry)
        bad = membership(pts, kind, geometry) != label
        while bad.any():
            pts[bad] = _draw(kind, label, int(bad.sum()), rng, geometry)
            bad = membership(pts, kind, geometry) != label
        chunks.append(pts)
        labels.append(np.full(count, label, dtype=np.int64))
    order = rng.permutation(n)
    return LabeledDataset(np.concatenate(chunks)[order], np.concatenate(labels)[order], kind, seed, geometry)


# -- PU splits --------------------------------------------------------------


@dataclass
class PuDataset:
    """Unlabeled set, labeled sensitive set and held-out normal test set.

    ``u_index``/``s_index``/``test_index`` point back into the source
    dataset; ``u_hidden_labels`` is kept for audits and never used in training.
    """

    U: np.ndarray
    S: np.ndarray
    test_normal: np.ndarray
    u_index: np.ndarray
    s_index: np.ndarray
    test_index: np.ndarray
    u_hidden_labels: np.ndarray
    provenance: dict


def make_pu_split(ds: LabeledDataset, n_u_normal: int, n_u_sensitive: int, n_s: int, n_test: int,
                  seed: int) -> PuDataset:
    if min(n_u_normal, n_u_sensitive, n_s, n_test) < 0:
        raise ValueError("split counts must be non-negative")
    normal = np.flatnonzero(ds.labels == NORMAL)
    sensitive = np.flatnonzero(ds.labels == SENSITIVE)
    shortfall = []
    if n_u_normal + n_test > normal.size:
        shortfall.append(f"{n_u_normal + n_test - normal.size} normal points "
                         f"(need {n_u_normal + n_test}, have {normal.size})")
    if n_u_sensitive + n_s > sensitive.size:
        shortfall.append(f"{n_u_sensitive + n_s - sensitive.size} sensitive points "
                         f"(need {n_u_sensitive + n_s}, have {sensitive.size})")
    if shortfall:
        raise ValueError("dataset too small: short by " + " and ".join(shortfall))

    rng = np.random.default_rng(seed)
    normal = rng.permutation(normal)
    sensitive = rng.permutation(sensitive)
    u_index = rng.permutation(np.concatenate([normal[:n_u_normal], sensitive[:n_u_sensitive]]))
    test_index = normal[n_u_normal : n_u_normal + n_test]
    s_index = sensitive[n_u_sensitive : n_u_sensitive + n_s]
    n_u = n_u_normal + n_u_sensitive
    provenance = {
        "kind": ds.kind.value,
        "data_seed": ds.seed,
        "split_seed": seed,
        "geometry": asdict(ds.geometry),
        "n_u_normal": n_u_normal,
        "n_u_sensitive": n_u_sensitive,
        "n_s": n_s,
        "n_test": n_test,
        "contamination": n_u_sensitive / n_u if n_u else 0.0,
    }
    return PuDataset(
        ds.points[u_index], ds.points[s_index], ds.points[test_index],
        u_index, s_index, test_index, ds.labels[u_index], provenance,
    )


# -- CSV persistence --------------------------------------------------------


def _header(ds: LabeledDataset) -> str:
    g = ds.geometry
    return (f"# kind={ds.kind.value}, seed={ds.seed}, n={len(ds)}, separation={g.separation!r}, "
            f"std={g.std!r}, moon_noise={g.moon_noise!r}, cell={g.cell!r}, board={g.board}")


def save_csv(ds: LabeledDataset, path) -> None:
    lines = [_header(ds), "x0,x1,label"]
    lines += [f"{x!r},{y!r},{int(lab)}" for (x, y), lab in zip(ds.points.tolist(), ds.labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path) -> LabeledDataset:
    lines = Path(path).read_text().split("\n")
    if not lines[0].startswith("# "):
        raise DataFormatError(path, 1, "missing '# kind=...' header")
    meta = {}
    for item in lines[0][2:].split(", "):
        key, sep, value = item.partition("=")
        if not sep:
            raise DataFormatError(path, 1, f"malformed header field {item!r}")
        meta[key] = value
    try:
        kind = Kind(meta["kind"])
        seed, n = int(meta["seed"]), int(meta["n"])
        geometry = Geometry(float(meta["separation"]), float(meta["std"]), float(meta["moon_noise"]),
                            float(meta["cell"]), int(meta["board"]))
    except (KeyError, ValueError) as exc:
        raise DataFormatError(path, 1, f"bad header: {exc}") from None
    if len(lines) < 2 or lines[1] != "x0,x1,label":
        raise DataFormatError(path, 2, "expected column line 'x0,x1,label'")
    if lines[-1] != "":
        raise DataFormatError(path, len(lines), "file does not end with a newline (truncated?)")
    rows = lines[2:-1]
    if len(rows) != n:
        raise DataFormatError(path, len(lines) - 1, f"header promises {n} rows, found {len(rows)}")
    points = np.empty((n, 2))
    labels = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows):
        parts = row.split(",")
        try:
            if len(parts) != 3:
                raise ValueError(f"expected 3 fields, got {len(parts)}")
            points[i] = float(parts[0]), float(parts[1])
            labels[i] = int(parts[2])
        except ValueError as exc:
            raise DataFormatError(path, i + 3, str(exc)) from None
        if labels[i] not in (NORMAL, SENSITIVE):
            raise DataFormatError(path, i + 3, f"label must be 0 or 1, got {labels[i]}")
    return LabeledDataset(points, labels, kind, seed, geometry)


SPLIT_FILES = {"U": "U.csv", "S": "S.csv", "test_normal": "test.csv"}


def save_pu_split(pu: PuDataset, directory) -> None:
    """Write U.csv, S.csv, test.csv and manifest.json (indices + provenance)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    kind = Kind(pu.provenance["kind"])
    geometry = Geometry(**pu.provenance["geometry"])
    seed = pu.provenance["data_seed"]
    parts = {
        "U": (pu.U, pu.u_hidden_labels),
        "S": (pu.S, np.full(len(pu.S), SENSITIVE)),
        "test_normal": (pu.test_normal, np.full(len(pu.test_normal), NORMAL)),
    }
    for name, (pts, labels) in parts.items():
        save_csv(LabeledDataset(pts, labels, kind, seed, geometry), out / SPLIT_FILES[name])
    manifest = {
        "provenance": pu.provenance,
        "files": SPLIT_FILES,
        "u_index": pu.u_index.tolist(),
        "s_index": pu.s_index.tolist(),
        "test_index": pu.test_index.tolist(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_pu_split(directory) -> PuDataset:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    manifest = json.loads(manifest_path.read_text())
    u = load_csv(d / SPLIT_FILES["U"])
    s = load_csv(d / SPLIT_FILES["S"])
    test = load_csv(d / SPLIT_FILES["test_normal"])
    return PuDataset(
        u.points, s.points, test.points,
        np.asarray(manifest["u_index"], dtype=np.int64),
        np.asarray(manifest["s_index"], dtype=np.int64),
        np.asarray(manifest["test_index"], dtype=np.int64),
        u.labels, manifest["provenance"],
    )
