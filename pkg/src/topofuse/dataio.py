"""CSV/JSON/SVG input and output for spot-level datasets and run artifacts.

All tabular files are plain CSV with a header row; the first column holds the
spot id. Numbers are written with %.17g so a load/write cycle is lossless.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateSpotId,
    InvalidDataset,
    IoFailure,
    MissingFile,
    NonNumericCell,
    OutOfRange,
    RowCountMismatch,
    UnknownKey,
)

FLOAT_FMT = "%.17g"


@dataclass
class SpotDataset:
    """In-memory dataset: expression, optional morphology, spot coordinates."""

    tra: np.ndarray
    coords: np.ndarray
    spot_ids: list[str]
    gene_ids: list[str]
    mor: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        n = self.tra.shape[0]
        if n < 2:
            raise InvalidDataset("need at least 2 spots")
        if len(self.spot_ids) != n or self.coords.shape[0] != n:
            raise RowCountMismatch("spot ids, expression and coordinates disagree on row count")
        if self.coords.shape[1] != 2:
            raise InvalidDataset("coordinates must have exactly 2 columns")
        if len(self.gene_ids) != self.tra.shape[1]:
            raise RowCountMismatch("gene id count does not match expression columns")
        if self.mor is not None and self.mor.shape[0] != n:
            raise RowCountMismatch("morphology row count does not match expression")
        if self.labels is not None and len(self.labels) != n:
            raise RowCountMismatch("label count does not match expression")
        for name, mat in (("tra", self.tra), ("coords", self.coords), ("mor", self.mor)):
            if mat is not None and not np.all(np.isfinite(mat)):
                raise NonNumericCell(f"non-finite value in {name}")

    @property
    def n_spots(self) -> int:
        return self.tra.shape[0]


# Defaults target a 10x-style section; epsilon_radius "auto" picks the
# smallest radius giving the median spot at least 4 spatial neighbors.
_CONFIG_SPEC = {
    "k_tr": (int, 7),
    "k_mo": (int, 7),
    "r_u_tr": (float, 0.1),
    "r_u_mo": (float, 0.1),
    "nu": (float, 0.05),
    "d_emb": (int, 72),
    "theta": (float, 0.9),
    "lambda_": (float, 0.01),
    "alpha": (float, 2.0),
    "tau": (int, 50),
    "n_mlp": (int, 1),
    "lr": (float, 0.001),
    "epochs": (int, 600),
    "seed": (int, 42),
    "epsilon_radius": (object, "auto"),
    "n_clusters": (int, 7),
    "refine": (bool, False),
    "fusion_mode": (str, "sum"),
}


@dataclass(frozen=True)
class RunConfig:
    """Validated hyperparameters for one run.

    `explicit` records which keys were set by the user rather than filled
    from defaults; it is ignored for equality so round-trips compare clean.
    """

    k_tr: int = 7
    k_mo: int = 7
    r_u_tr: float = 0.1
    r_u_mo: float = 0.1
    nu: float = 0.05
    d_emb: int = 72
    theta: float = 0.9
    lambda_: float = 0.01
    alpha: float = 2.0
    tau: int = 50
    n_mlp: int = 1
    lr: float = 0.001
    epochs: int = 600
    seed: int = 42
    epsilon_radius: float | str = "auto"
    n_clusters: int = 7
    refine: bool = False
    fusion_mode: str = "sum"
    explicit: frozenset = field(default_factory=frozenset, compare=False, repr=False)

    def __post_init__(self):
        _validate_config_values(dataclasses.asdict(self))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("explicit")
        return d

    def replace(self, **kv) -> "RunConfig":
        merged = self.to_dict()
        merged.update(kv)
        explicit = self.explicit | frozenset(kv)
        return RunConfig(**merged, explicit=explicit)


def _validate_config_values(d: dict):
    def bad(key, why):
        raise OutOfRange(f"config key {key!r}: {why}")

    for key, (kind, _) in _CONFIG_SPEC.items():
        v = d[key]
        if kind is int:
            if isinstance(v, bool) or not isinstance(v, int):
                bad(key, f"expected integer, got {v!r}")
        elif kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                bad(key, f"expected number, got {v!r}")
            if not math.isfinite(float(v)):
                bad(key, "must be finite")
        elif kind is bool:
            if not isinstance(v, bool):
                bad(key, f"expected true/false, got {v!r}")
        elif kind is str:
            if not isinstance(v, str):
                bad(key, f"expected string, got {v!r}")

    for key in ("k_tr", "k_mo", "d_emb", "n_mlp", "epochs", "n_clusters"):
        if d[key] < 1:
            bad(key, "must be a positive integer")
    for key in ("r_u_tr", "r_u_mo"):
        if not 0.0 < d[key] <= 1.0:
            bad(key, "must lie in (0, 1]")
    if d["nu"] <= 0.0:
        bad("nu", "must be positive")
    if not 0.0 <= d["theta"] <= 1.0:
        bad("theta", "must lie in [0, 1]")
    if d["lambda_"] < 0.0:
        bad("lambda_", "must be nonnegative")
    if d["alpha"] < 0.0:
        bad("alpha", "must be nonnegative")
    if d["tau"] < 0:
        bad("tau", "must be nonnegative")
    if d["lr"] < 0.0:
        bad("lr", "must be nonnegative")
    if d["seed"] < 0:
        bad("seed", "must be nonnegative")
    eps = d["epsilon_radius"]
    if isinstance(eps, str):
        if eps != "auto":
            bad("epsilon_radius", f'expected a positive number or "auto", got {eps!r}')
    elif isinstance(eps, bool) or not isinstance(eps, (int, float)) or not eps > 0:
        bad("epsilon_radius", f'expected a positive number or "auto", got {eps!r}')
    if d["fusion_mode"] not in ("sum", "concat"):
        bad("fusion_mode", f'expected "sum" or "concat", got {d["fusion_mode"]!r}')


def config_from_dict(d: dict) -> RunConfig:
    """Build a RunConfig from a flat mapping, rejecting unknown keys."""
    unknown = sorted(set(d) - set(_CONFIG_SPEC))
    if unknown:
        raise UnknownKey(f"unknown config keys: {', '.join(unknown)}")
    values = {k: d[k] for k in d}
    # JSON has no int/float distinction worth fighting over; coerce whole floats.
    for key, (kind, _) in _CONFIG_SPEC.items():
        if key in values and kind is int and isinstance(values[key], float) and not isinstance(values[key], bool):
            if float(values[key]).is_integer():
                values[key] = int(values[key])
    return RunConfig(**values, explicit=frozenset(values))


def load_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise MissingFile(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise NonNumericCell(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise NonNumericCell(f"config {path} must hold a flat JSON object")
    return config_from_dict(raw)


def write_config(cfg: RunConfig, path: str):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
            fh.write("\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _read_table(path: str, what: str) -> tuple[list[str], list[str], np.ndarray]:
    """Read a CSV into (column names, row ids, float matrix)."""
    if not os.path.isfile(path):
        raise MissingFile(f"{what} file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    if not rows:
        raise InvalidDataset(f"{what} file {path} is empty")
    header = rows[0]
    if len(header) < 2:
        raise InvalidDataset(f"{what} file {path} needs an id column plus data columns")
    cols = header[1:]
    ids: list[str] = []
    data = np.empty((len(rows) - 1, len(cols)), dtype=np.float64)
    for r, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise RowCountMismatch(
                f"{what} row {r + 2} of {path} has {len(row)} fields, header has {len(header)}"
            )
        ids.append(row[0])
        for c, cell in enumerate(row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise NonNumericCell(
                    f"{what} cell at row {row[0]!r}, column {cols[c]!r} is not numeric: {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise NonNumericCell(
                    f"{what} cell at row {row[0]!r}, column {cols[c]!r} is not finite: {cell!r}"
                )
            data[r, c] = v
    seen = set()
    for sid in ids:
        if sid in seen:
            raise DuplicateSpotId(f"duplicate spot id {sid!r} in {path}")
        seen.add(sid)
    return cols, ids, data


def _align(ids: list[str], other_ids: list[str], other: np.ndarray, what: str) -> np.ndarray:
    index = {sid: i for sid, i in zip(other_ids, range(len(other_ids)))}
    missing = [sid for sid in ids if sid not in index]
    if missing:
        raise RowCountMismatch(
            f"{what} is missing {len(missing)} spot id(s) present in expression, e.g. {missing[0]!r}"
        )
    return other[[index[sid] for sid in ids]]


def load_dataset(
    tra_path: str,
    coords_path: str,
    mor_path: str | None = None,
    labels_path: str | None = None,
) -> SpotDataset:
    """Load expression + coordinates (+ optional morphology and labels).

    Rows follow the order of the expression file; the other files must cover
    every expression spot id and may hold extras, which are dropped.
    """
    gene_ids, spot_ids, tra = _read_table(tra_path, "expression")
    _, coord_ids, coords = _read_table(coords_path, "coordinates")
    if coords.shape[1] != 2:
        raise InvalidDataset(f"coordinates file {coords_path} must have exactly x and y columns")
    coords = _align(spot_ids, coord_ids, coords, "coordinates")

    mor = None
    if mor_path is not None:
        _, mor_ids, mor_raw = _read_table(mor_path, "morphology")
        mor = _align(spot_ids, mor_ids, mor_raw, "morphology")

    labels = None
    if labels_path is not None:
        _, label_ids, lab_raw = _read_table(labels_path, "labels")
        lab = _align(spot_ids, label_ids, lab_raw, "labels")[:, 0]
        rounded = np.rint(lab)
        if not np.allclose(lab, rounded, atol=1e-9):
            raise NonNumericCell(f"labels in {labels_path} must be integers")
        labels = rounded.astype(np.int64)

    return SpotDataset(tra=tra, coords=coords, spot_ids=spot_ids, gene_ids=gene_ids, mor=mor, labels=labels)


def write_matrix_csv(path: str, row_ids: list[str], col_names: list[str], m: np.ndarray):
    if m.shape != (len(row_ids), len(col_names)):
        raise RowCountMismatch(f"matrix shape {m.shape} does not match ids for {path}")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["spot_id"] + list(col_names))
            for sid, row in zip(row_ids, m):
                w.writerow([sid] + [FLOAT_FMT % v for v in row])
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_matrix_csv(path: str, what: str = "matrix") -> tuple[list[str], list[str], np.ndarray]:
    return _read_table(path, what)


def write_dataset(ds: SpotDataset, out_dir: str) -> list[str]:
    """Write a dataset as tra/coords(/mor/labels) CSVs; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    p = os.path.join(out_dir, "tra.csv")
    write_matrix_csv(p, ds.spot_ids, ds.gene_ids, ds.tra)
    paths.append(p)
    p = os.path.join(out_dir, "coords.csv")
    write_matrix_csv(p, ds.spot_ids, ["x", "y"], ds.coords)
    paths.append(p)
    if ds.mor is not None:
        p = os.path.join(out_dir, "mor.csv")
        write_matrix_csv(p, ds.spot_ids, [f"m{i}" for i in range(ds.mor.shape[1])], ds.mor)
        paths.append(p)
    if ds.labels is not None:
        p = os.path.join(out_dir, "labels.csv")
        try:
            with open(p, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["spot_id", "label"])
                for sid, lab in zip(ds.spot_ids, ds.labels):
                    w.writerow([sid, int(lab)])
        except OSError as e:
            raise IoFailure(f"cannot write {p}: {e}") from e
        paths.append(p)
    return paths


@dataclass
class AnalysisReport:
    """Everything one analysis run wants to persist."""

    spot_ids: list[str]
    embedding: np.ndarray | None = None
    labels: np.ndarray | None = None
    coords: np.ndarray | None = None
    vis: np.ndarray | None = None
    metrics: dict = field(default_factory=dict)
    loss_history: list | None = None
    paga_edges: list | None = None
    markers: list | None = None  # rows of (cluster, rank, gene_id, importance)
    deconvolution: dict | None = None  # cluster_ids, weights, impurity
    contributions: dict | None = None
    notes: dict = field(default_factory=dict)
    config: dict | None = None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_report(report: AnalysisReport, out_dir: str) -> list[str]:
    """Serialize a report to CSV/JSON/SVG files; returns the written paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {out_dir}: {e}") from e
    paths = []
    n = len(report.spot_ids)

    if report.embedding is not None:
        emb = np.asarray(report.embedding, dtype=np.float64)
        p = os.path.join(out_dir, "embedding.csv")
        write_matrix_csv(p, report.spot_ids, [f"z{i}" for i in range(emb.shape[1])], emb)
        paths.append(p)

    if report.labels is not None:
        if len(report.labels) != n:
            raise RowCountMismatch("labels do not match spot ids")
        p = os.path.join(out_dir, "labels.csv")
        try:
            with open(p, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["spot_id", "label"])
                for sid, lab in zip(report.spot_ids, report.labels):
                    w.writerow([sid, int(lab)])
        except OSError as e:
            raise IoFailure(f"cannot write {p}: {e}") from e
        paths.append(p)

    if report.vis is not None:
        p = os.path.join(out_dir, "vis.csv")
        write_matrix_csv(p, report.spot_ids, ["v0", "v1"], np.asarray(report.vis))
        paths.append(p)

    if report.markers is not None:
        p = os.path.join(out_dir, "markers.csv")
        try:
            with open(p, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["cluster", "rank", "gene_id", "importance"])
                for cluster, rank, gene_id, imp in report.markers:
                    w.writerow([int(cluster), int(rank), gene_id, FLOAT_FMT % imp])
        except OSError as e:
            raise IoFailure(f"cannot write {p}: {e}") from e
        paths.append(p)

    if report.deconvolution is not None:
        dec = report.deconvolution
        p = os.path.join(out_dir, "deconvolution.csv")
        cols = [f"w_{c}" for c in dec["cluster_ids"]] + ["weight_dispersion"]
        body = np.column_stack([np.asarray(dec["weights"]), np.asarray(dec["impurity"])])
        write_matrix_csv(p, report.spot_ids, cols, body)
        paths.append(p)

    if report.contributions is not None and "per_spot" in report.contributions:
        contrib = report.contributions
        p = os.path.join(out_dir, "contributions.csv")
        write_matrix_csv(p, report.spot_ids, list(contrib["names"]), np.asarray(contrib["per_spot"]))
        paths.append(p)

    payload = {
        "metrics": _jsonable(report.metrics),
        "notes": _jsonable(report.notes),
    }
    if report.config is not None:
        payload["config"] = _jsonable(report.config)
    if report.loss_history is not None:
        payload["loss_history"] = _jsonable(report.loss_history)
    if report.paga_edges is not None:
        payload["paga_edges"] = _jsonable(report.paga_edges)
    if report.markers is not None:
        payload["markers"] = _jsonable(
            [{"cluster": c, "rank": r, "gene_id": g, "importance": v} for c, r, g, v in report.markers]
        )
    if report.contributions is not None:
        summary = {k: _jsonable(v) for k, v in report.contributions.items() if k != "per_spot"}
        payload["modality_contribution"] = summary
    p = os.path.join(out_dir, "report.json")
    try:
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    except OSError as e:
        raise IoFailure(f"cannot write {p}: {e}") from e
    paths.append(p)

    if report.coords is not None and report.labels is not None:
        p = os.path.join(out_dir, "domains.svg")
        plot_scatter(np.asarray(report.coords), np.asarray(report.labels), p)
        paths.append(p)
    if report.vis is not None and report.labels is not None:
        p = os.path.join(out_dir, "vis.svg")
        plot_scatter(np.asarray(report.vis), np.asarray(report.labels), p)
        paths.append(p)
    return paths


def _label_palette(n: int) -> list[str]:
    # Golden-angle hue walk; value cycles so nearby indices stay distinguishable.
    colors = []
    for i in range(n):
        h = (i * 0.61803398875) % 1.0
        s = 0.65
        v = (0.75, 0.92, 0.58)[i % 3]
        k = int(h * 6.0)
        f = h * 6.0 - k
        p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
        r, g, b = [
            (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
        ][k % 6]
        colors.append("#%02x%02x%02x" % (round(r * 255), round(g * 255), round(b * 255)))
    return colors


def plot_scatter(points: np.ndarray, labels: np.ndarray, path: str, size: int = 520):
    """Write an SVG scatter of `points` with one fill color per distinct label."""
    pts = np.asarray(points, dtype=np.float64)
    labs = np.asarray(labels)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise RowCountMismatch("plot_scatter expects an N x 2 matrix")
    if len(labs) != pts.shape[0]:
        raise RowCountMismatch("labels do not match points")
    if len(labs) and labs.min() < 0:
        raise OutOfRange("labels must be nonnegative")
    uniq = sorted(set(int(v) for v in labs))
    palette = _label_palette(len(uniq))
    color_of = {lab: palette[i] for i, lab in enumerate(uniq)}

    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-12))
    pad = 0.05 * span
    scale = (size - 2 * 10) / (span + 2 * pad)

    def sx(x):
        return 10 + (x - lo[0] + pad) * scale

    def sy(y):
        # SVG y grows downward; flip so the plot reads like a map.
        return size - 10 - (y - lo[1] + pad) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for (x, y), lab in zip(pts, labs):
        parts.append(
            f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" fill="{color_of[int(lab)]}"/>'
        )
    parts.append("</svg>")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(parts) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
