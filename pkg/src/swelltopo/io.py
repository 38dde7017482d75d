"""Artifact writers: legacy ASCII VTK, CSV, PGM.  Every write goes through a temp file and a rename."""
from __future__ import annotations

import contextlib
import csv
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import OutputError

VTK_QUAD = 9


@contextlib.contextmanager
def atomic_write(path, mode="w"):
    """Open a temp file next to ``path``; rename it over ``path`` only if the block succeeds."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as fh:
            yield fh
        os.replace(tmp, path)
    except OSError as exc:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise OutputError(f"cannot write {path}: {exc}") from exc
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def write_text(path, text):
    with atomic_write(path) as fh:
        fh.write(text)


def write_csv(path, header, rows):
    with atomic_write(path) as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(v) for v in row])


def write_dict_rows(path, rows):
    """CSV from a list of dicts sharing the first row's keys."""
    if not rows:
        raise OutputError(f"no rows to write to {path}")
    header = list(rows[0])
    write_csv(path, header, ([r[k] for k in header] for r in rows))


def _fmt(v):
    # repr round-trips floats exactly, which keeps logged values recomputable
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_vtk(path, mesh, u=None, cell_data=None, title="swelltopo", deformed=False):
    """Unstructured grid of quads with point vector ``u`` and cell scalars.

    With ``deformed=True`` the points are written at ``X + u``.
    """
    X = np.asarray(mesh.nodes, float)
    U = np.zeros_like(X) if u is None else np.asarray(u, float).reshape(-1, 2)
    P = X + U if deformed else X
    nn, ne = len(X), mesh.n_elements
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {nn} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in P.tolist()]
    lines.append(f"CELLS {ne} {5 * ne}")
    lines += ["4 " + " ".join(map(str, c)) for c in mesh.elements.tolist()]
    lines.append(f"CELL_TYPES {ne}")
    lines += [str(VTK_QUAD)] * ne
    lines += [f"POINT_DATA {nn}", "VECTORS u double"]
    lines += [f"{a!r} {b!r} 0.0" for a, b in U.tolist()]
    if cell_data:
        lines.append(f"CELL_DATA {ne}")
        for name, vals in cell_data.items():
            vals = np.asarray(vals, float).ravel()
            if vals.size != ne:
                raise ValueError(f"cell field {name!r} has {vals.size} values for {ne} cells")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(v) for v in vals.tolist()]
    write_text(path, "\n".join(lines) + "\n")


def write_pgm(path, field):
    """Plain (P2) graymap of a field in [0, 1]; row 0 of ``field`` is the bottom of the domain."""
    f = np.clip(np.asarray(field, float), 0.0, 1.0)[::-1]
    img = np.rint(255 * f).astype(int)
    rows = [" ".join(map(str, r)) for r in img.tolist()]
    write_text(path, f"P2\n{img.shape[1]} {img.shape[0]}\n255\n" + "\n".join(rows) + "\n")
