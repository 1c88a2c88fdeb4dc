"""Text formats: long-format observations, grid files and the versioned model bundle.

Every flattened array is written in row-major order with the last axis
varying fastest.  Floats use ``%.17g`` so that reading a file back gives
the same doubles.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from dfpca.core import EvaluationGrid, FunctionalDataset, SurfaceEstimate
from dfpca.eigen import EigenSystem
from dfpca.errors import ParseError, VersionMismatch
from dfpca.scores import FpcaModel

FORMAT_VERSION = 1
PathLike = Union[str, Path]


def _f(x: float) -> str:
    return "%.17g" % float(x)


def _floats(row: Sequence[str], path, lineno: int) -> list:
    try:
        return [float(x) for x in row]
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: {exc}") from exc


def read_long(path: PathLike, bounding_box: Optional[np.ndarray] = None) -> FunctionalDataset:
    """Read ``sample_id, t_1..t_d, y`` records; the header names the axes.

    Samples keep the order of their first appearance.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}:1: empty file, expected a header row")
        header = [h.strip() for h in header]
        if len(header) < 3:
            raise ParseError(f"{path}:1: header needs sample_id, at least one axis and a value column")
        axis_names = tuple(header[1:-1])
        d = len(axis_names)
        groups: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 2:
                raise ParseError(f"{path}:{lineno}: expected {d + 2} fields, found {len(row)}")
            vals = _floats(row[1:], path, lineno)
            if not np.all(np.isfinite(vals)):
                raise ParseError(f"{path}:{lineno}: non-finite number")
            groups.setdefault(row[0].strip(), []).append(vals)
    if not groups:
        raise ParseError(f"{path}:2: no observations")
    ids = list(groups)
    samples = []
    for k in ids:
        a = np.array(groups[k], dtype=float)
        samples.append((a[:, :d], a[:, d]))
    return FunctionalDataset.from_samples(samples, ids=ids, bounding_box=bounding_box, axis_names=axis_names)


def write_long(dataset: FunctionalDataset, path: PathLike, value_name: str = "y") -> None:
    names = list(dataset.axis_names) or [f"t_{k + 1}" for k in range(dataset.d)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["sample_id"] + names + [value_name])
        for sid, (c, v) in zip(dataset.ids, dataset):
            for row, y in zip(c, v):
                wr.writerow([sid] + [_f(x) for x in row] + [_f(y)])


def grid_to_dict(grid: EvaluationGrid) -> dict:
    out = {"axes": [[float(x) for x in ax] for ax in grid.axes]}
    if grid.mask is not None:
        out["mask"] = [int(b) for b in np.asarray(grid.mask, dtype=bool).ravel()]
    return out


def grid_from_dict(obj: dict) -> EvaluationGrid:
    axes = tuple(np.asarray(a, dtype=float) for a in obj["axes"])
    mask = obj.get("mask")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(tuple(len(a) for a in axes))
    return EvaluationGrid(axes, mask)


def write_grid(grid: EvaluationGrid, path: PathLike) -> None:
    Path(path).write_text(json.dumps(grid_to_dict(grid), indent=1) + "\n")


def read_grid(path: PathLike) -> EvaluationGrid:
    try:
        return grid_from_dict(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}:1: invalid grid file: {exc}") from exc


def _write_array(path: Path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in zip(*columns):
            wr.writerow([x if isinstance(x, str) else ("nan" if np.isnan(x) else _f(x)) for x in row])


def _read_table(path: Path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}:1: empty file")
    return rows[0], rows[1:]


def write_scores(model: FpcaModel, path: PathLike) -> None:
    ids = list(model.ids) or [str(i) for i in range(model.scores.shape[0])]
    _write_array(Path(path), ["sample_id"] + [f"A_{k + 1}" for k in range(model.L)], [ids] + list(model.scores.T))


def save_model(model: FpcaModel, directory: PathLike, config: Optional[dict] = None) -> Path:
    """Write the model bundle.

    Layout: ``model.json`` (version, sigma2, shape, metadata, resolved
    config), ``grid.json``, ``mean.csv`` and ``eigenfunctions.csv`` (one
    column per array, row-major nodes), ``eigen_manifest.csv`` and
    ``scores.csv``.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    grid = model.grid
    write_grid(grid, out / "grid.json")
    _write_array(out / "mean.csv", ["mean"], [model.mean.values.ravel()])
    funcs = model.eig.eigenfunctions.reshape(model.L, -1)
    _write_array(out / "eigenfunctions.csv", [f"phi_{k + 1}" for k in range(model.L)], list(funcs))
    _write_array(
        out / "eigen_manifest.csv",
        ["component", "eigenvalue", "fve"],
        [[str(k + 1) for k in range(model.L)], model.eig.eigenvalues, model.eig.fve],
    )
    write_scores(model, out / "scores.csv")
    meta = {
        "format_version": FORMAT_VERSION,
        "sigma2": _f(model.sigma2),
        "total_variance": _f(model.eig.total_variance),
        "n_components": model.L,
        "ids": list(model.ids),
        "metadata": model.metadata,
        "config": config or {},
    }
    (out / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


def load_model(directory: PathLike) -> FpcaModel:
    src = Path(directory)
    try:
        meta = json.loads((src / "model.json").read_text())
    except FileNotFoundError as exc:
        raise ParseError(f"{src / 'model.json'}:1: missing model metadata") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{src / 'model.json'}:{exc.lineno}: {exc.msg}") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"bundle format {version!r}, this reader supports {FORMAT_VERSION}")
    grid = read_grid(src / "grid.json")
    _, rows = _read_table(src / "mean.csv")
    mean = np.array([float(r[0]) for r in rows]).reshape(grid.shape)
    L = int(meta["n_components"])
    _, rows = _read_table(src / "eigenfunctions.csv")
    funcs = np.array([[float(x) for x in r] for r in rows]).reshape(grid.size, L).T.reshape((L,) + grid.shape)
    _, rows = _read_table(src / "eigen_manifest.csv")
    lam = np.array([float(r[1]) for r in rows])
    fve = np.array([float(r[2]) for r in rows])
    _, rows = _read_table(src / "scores.csv")
    scores = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(len(rows), L)
    eig = EigenSystem(grid, lam, funcs, fve, float(meta["total_variance"]), {})
    return FpcaModel(
        SurfaceEstimate(grid, mean, "mean"),
        eig,
        float(meta["sigma2"]),
        scores,
        tuple(meta.get("ids", ())),
        meta.get("metadata", {}),
    )


def write_json(obj: dict, path: PathLike) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")
