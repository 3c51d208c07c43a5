"""CSV ingestion and serialization of dyadic datasets."""

from __future__ import annotations

import csv
import json
import logging
import re
from pathlib import Path

import numpy as np

from .core import DyadicDataset, DyadnetError, validate_dataset

log = logging.getLogger(__name__)

_INT_TOKEN = re.compile(r"^[+-]?\d+$")


class IngestError(DyadnetError, ValueError):
    pass


class ConflictError(IngestError):
    """Two rows disagree about the same dyad."""

    def __init__(self, a, b, first, second):
        self.dyad = (a, b)
        super().__init__(f"conflicting rows for dyad ({a}, {b}): {first!r} vs {second!r}")


class NodeReferenceError(IngestError):
    pass


class IncompleteEdgesError(IngestError):
    pass


def _read_rows(path, required):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if required is not None and header[:len(required)] != list(required):
            raise IngestError(f"{path}: expected header starting with {','.join(required)}, got {','.join(header)}")
        rows = [[c.strip() for c in r] for r in reader if r and any(c.strip() for c in r)]
    for ln, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise IngestError(f"{path}:{ln}: expected {len(header)} fields, got {len(r)}")
    return header, rows


def _parse_float(tok, where):
    try:
        return float(tok)
    except ValueError:
        raise IngestError(f"{where}: cannot parse {tok!r} as a number") from None


def read_nodes(path, discrete=None):
    """Parse a node file ``id,x1,...,xk``.

    A column is treated as discrete when it holds non-numeric labels or only
    integer tokens; ``discrete`` (column names or a flag list) overrides.
    Returns ``(ids, X, discrete_flags, column_names)``.
    """
    header, rows = _read_rows(path, None)
    if not header or header[0] != "id":
        raise IngestError(f"{path}: first column must be 'id'")
    cols = header[1:]
    ids = [r[0] for r in rows]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise IngestError(f"{path}: duplicate node ids {dup[:10]}")
    flags = []
    data = []
    for c in range(len(cols)):
        toks = [r[c + 1] for r in rows]
        numeric = True
        for t in toks:
            try:
                float(t)
            except ValueError:
                numeric = False
                break
        is_int = numeric and all(_INT_TOKEN.match(t) for t in toks)
        flags.append(not numeric or is_int)
        data.append([float(t) for t in toks] if numeric else toks)
    if discrete is not None:
        if len(discrete) and isinstance(next(iter(discrete)), str):
            unknown = set(discrete) - set(cols)
            if unknown:
                raise IngestError(f"unknown covariate columns {sorted(unknown)}")
            flags = [c in set(discrete) for c in cols]
        else:
            flags = [bool(f) for f in discrete]
    if any(isinstance(d[0], str) for d in data if d):
        X = np.empty((len(ids), len(cols)), dtype=object)
        for c, d in enumerate(data):
            X[:, c] = d
    else:
        X = np.array(data, dtype=float).T.reshape(len(ids), len(cols))
    return ids, X, flags, cols


def ingest(nodes_path, edges_path, mask_path=None, missing_implicit: bool = False,
           absent_as_zero: bool = False, discrete=None) -> DyadicDataset:
    """Build a validated dataset from node, edge and (optional) mask files.

    Every unordered pair must be accounted for: listed in the edge file,
    declared unobserved in the mask file, or covered by a policy flag.
    ``missing_implicit`` treats absent pairs as unobserved; ``absent_as_zero``
    treats them as observed zeros (binary networks listing only links).
    """
    if missing_implicit and absent_as_zero:
        raise IngestError("missing_implicit and absent_as_zero are mutually exclusive")
    ids, X, flags, _ = read_nodes(nodes_path, discrete)
    index = {s: k for k, s in enumerate(ids)}
    n = len(ids)

    def lookup(tok, path, ln):
        try:
            return index[tok]
        except KeyError:
            raise NodeReferenceError(f"{path}:{ln}: unknown node id {tok!r}") from None

    Y = np.zeros((n, n))
    D = np.zeros((n, n), dtype=bool)
    _, rows = _read_rows(edges_path, ("i", "j", "y"))
    for ln, r in enumerate(rows, start=2):
        a, b = lookup(r[0], edges_path, ln), lookup(r[1], edges_path, ln)
        if a == b:
            raise IngestError(f"{edges_path}:{ln}: self-loop on {r[0]!r} is not data")
        y = _parse_float(r[2], f"{edges_path}:{ln}")
        if D[a, b] and Y[a, b] != y:
            raise ConflictError(ids[min(a, b)], ids[max(a, b)], Y[a, b], y)
        Y[a, b] = Y[b, a] = y
        D[a, b] = D[b, a] = True

    listed = D.copy()
    if mask_path is not None:
        declared = np.zeros((n, n), dtype=bool)
        _, mrows = _read_rows(mask_path, ("i", "j", "d"))
        for ln, r in enumerate(mrows, start=2):
            a, b = lookup(r[0], mask_path, ln), lookup(r[1], mask_path, ln)
            if a == b:
                continue
            if r[2] not in ("0", "1"):
                raise IngestError(f"{mask_path}:{ln}: mask value must be 0 or 1, got {r[2]!r}")
            d = r[2] == "1"
            if declared[a, b] and D[a, b] != d:
                raise ConflictError(ids[min(a, b)], ids[max(a, b)], int(D[a, b]), int(d))
            if listed[a, b] and not d:
                raise ConflictError(ids[min(a, b)], ids[max(a, b)], "edge row", "mask d=0")
            if d and not listed[a, b]:
                if not absent_as_zero:
                    raise IncompleteEdgesError(
                        f"dyad ({r[0]}, {r[1]}) is marked observed in the mask but has no edge row")
                Y[a, b] = Y[b, a] = 0.0
            declared[a, b] = declared[b, a] = True
            D[a, b] = D[b, a] = d
        accounted = declared | listed
    else:
        accounted = listed

    off = ~np.eye(n, dtype=bool)
    gaps = off & ~accounted
    if gaps.any():
        if absent_as_zero:
            D |= gaps
        elif not missing_implicit:
            a, b = np.argwhere(np.triu(gaps))[0]
            total = int(np.triu(gaps).sum())
            raise IncompleteEdgesError(
                f"{total} dyads are neither listed nor masked, e.g. ({ids[a]}, {ids[b]}); "
                "pass a mask file, missing_implicit or absent_as_zero")

    ds = DyadicDataset(Y=Y, D=D, X=X, discrete=flags, ids=tuple(ids))
    report = validate_dataset(ds)
    if not report.ok:
        raise IngestError("invalid dataset: " + report.summary())
    for msg in report.messages:
        log.warning(msg)
    return ds


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _node_token(v, discrete):
    if discrete and isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return _fmt(v)


def write_nodes(ds: DyadicDataset, path, columns=None):
    cols = columns or [f"x{c + 1}" for c in range(ds.X.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *cols])
        for k, s in enumerate(ds.ids):
            w.writerow([s, *(_node_token(ds.X[k, c], ds.discrete[c]) for c in range(ds.X.shape[1]))])


def write_edges(ds: DyadicDataset, path):
    """Observed dyads, one row per unordered pair with ``i < j`` in index order."""
    iu = np.triu_indices(ds.n, k=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "y"])
        for a, b in zip(*iu):
            if ds.D[a, b]:
                w.writerow([ds.ids[a], ds.ids[b], _fmt(ds.Y[a, b])])


def write_mask(ds: DyadicDataset, path):
    iu = np.triu_indices(ds.n, k=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "d"])
        for a, b in zip(*iu):
            w.writerow([ds.ids[a], ds.ids[b], int(ds.D[a, b])])


def write_dataset(ds: DyadicDataset, prefix, truth=None, meta: dict | None = None) -> dict:
    """Write ``<prefix>_nodes.csv``, ``_edges.csv``, ``_mask.csv`` and optionally ``_truth.json``."""
    prefix = str(prefix)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    paths = {"nodes": prefix + "_nodes.csv", "edges": prefix + "_edges.csv", "mask": prefix + "_mask.csv"}
    write_nodes(ds, paths["nodes"])
    write_edges(ds, paths["edges"])
    write_mask(ds, paths["mask"])
    if truth is not None:
        paths["truth"] = prefix + "_truth.json"
        payload = {"ids": list(ds.ids), **truth.to_dict(), **(meta or {})}
        with open(paths["truth"], "w") as fh:
            json.dump(payload, fh)
    return paths


def write_matrix(M, ids, path):
    """Wide CSV with agent ids as the header row and first column; ``inf`` kept literal."""
    M = np.asarray(M)
    if hasattr(path, "write"):
        _matrix_rows(csv.writer(path), M, ids)
        return
    with open(path, "w", newline="") as fh:
        _matrix_rows(csv.writer(fh), M, ids)


def _matrix_rows(w, M, ids):
    w.writerow(["id", *ids])
    for k, s in enumerate(ids):
        w.writerow([s, *(_fmt(v) for v in M[k])])


def read_matrix(path):
    header, rows = _read_rows(path, None)
    ids = header[1:]
    M = np.array([[float(t) for t in r[1:]] for r in rows])
    return [r[0] for r in rows], ids, M
