"""Model, trajectory, clustering and particle-table files.

Model files are JSON::

    {
      "variables": [{"name": "X0", "cardinality": 2, "kind": "state"}, ...],
      "prior":      {"X0": {"parents": [], "probabilities": [0.3, 0.7]}, ...},
      "transition": {"X0": {"parents": ["prev:X0", "cur:X1"], "probabilities": [...]}, ...}
    }

``probabilities`` is the CPT flattened row by row (parent assignments in
lexicographic order, first parent most significant). Prior parents may omit
the ``cur:`` tag.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np

from .errors import ModelFormatError
from .filters import Clustering
from .model import CUR, PREV, Cpt, DbnModel, Trajectory, Variable, check_model
from .tables import ParticleTable


def model_to_dict(model: DbnModel) -> dict:
    def cpt_dict(cpt: Cpt, tagged: bool) -> dict:
        parents = [f"{s}:{p}" if tagged else p for p, s in cpt.parents]
        return {"parents": parents, "probabilities": [float(x) for x in cpt.probabilities.ravel()]}

    return {
        "variables": [{"name": v.name, "cardinality": int(v.cardinality), "kind": v.kind} for v in model.variables],
        "prior": {k: cpt_dict(c, False) for k, c in model.prior.items()},
        "transition": {k: cpt_dict(c, True) for k, c in model.transition.items()},
    }


def dumps_model(model: DbnModel) -> str:
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def save_model(model: DbnModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def _field(obj, key, where, kind):
    if not isinstance(obj, Mapping) or key not in obj:
        raise ModelFormatError(f"{where}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise ModelFormatError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _parse_cpt(child, spec, section, cards) -> Cpt:
    where = f"{section}.{child}"
    if child not in cards:
        raise ModelFormatError(f"{where}: unknown variable {child!r}")
    parents = []
    for i, ref in enumerate(_field(spec, "parents", where, list)):
        if not isinstance(ref, str):
            raise ModelFormatError(f"{where}.parents[{i}]: expected string, got {ref!r}")
        tag, sep, name = ref.partition(":")
        if not sep:
            tag, name = CUR, ref
        if tag not in (PREV, CUR):
            raise ModelFormatError(f"{where}.parents[{i}]: unknown slice tag {tag!r} in {ref!r}")
        if name not in cards:
            raise ModelFormatError(f"{where}.parents[{i}]: unknown variable reference {name!r}")
        parents.append((name, tag))
    probs = _field(spec, "probabilities", where, list)
    try:
        flat = np.array(probs, dtype=float)
    except (TypeError, ValueError):
        raise ModelFormatError(f"{where}.probabilities: not a flat list of numbers") from None
    if flat.ndim != 1 or flat.size % cards[child]:
        raise ModelFormatError(
            f"{where}.probabilities: {flat.size} entries is not a multiple of cardinality {cards[child]}")
    return Cpt(child, tuple(parents), flat.reshape(-1, cards[child]))


def model_from_dict(data) -> DbnModel:
    variables = []
    cards: dict[str, int] = {}
    for i, v in enumerate(_field(data, "variables", "model", list)):
        where = f"variables[{i}]"
        name = _field(v, "name", where, str)
        card = _field(v, "cardinality", where, int)
        kind = v.get("kind", "state") if isinstance(v, Mapping) else "state"
        variables.append(Variable(name, card, kind))
        cards[name] = card
    sections = {}
    for section in ("prior", "transition"):
        spec = _field(data, section, "model", dict)
        sections[section] = {child: _parse_cpt(child, s, section, cards) for child, s in spec.items()}
    return DbnModel(tuple(variables), sections["prior"], sections["transition"])


def loads_model(text: str, validate: bool = True) -> DbnModel:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    model = model_from_dict(data)
    return check_model(model) if validate else model


def load_model(path, validate: bool = True) -> DbnModel:
    """Read a model file; structural problems raise ModelValidationError."""
    return loads_model(Path(path).read_text(), validate)


# --------------------------------------------------------------------------
# trajectories


def dumps_trajectory(traj: Trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    hidden_names = traj.state_names if traj.hidden is not None else ()
    w.writerow(["t", *hidden_names, *traj.obs_names])
    for t in range(len(traj)):
        hidden = traj.hidden[t].tolist() if traj.hidden is not None else []
        w.writerow([t, *hidden, *traj.observed[t].tolist()])
    return buf.getvalue()


def save_trajectory(traj: Trajectory, path, observations_only: bool = False) -> None:
    Path(path).write_text(dumps_trajectory(traj.without_hidden() if observations_only else traj))


def loads_trajectory(text: str, model: DbnModel) -> Trajectory:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ModelFormatError("trajectory file is empty") from None
    if not header or header[0] != "t":
        raise ModelFormatError("line 1: header must start with 't'")
    cols = header[1:]
    known = set(model.names)
    for c in cols:
        if c not in known:
            raise ModelFormatError(f"line 1: unknown variable {c!r}")
    missing_obs = [n for n in model.obs_names if n not in cols]
    if missing_obs:
        raise ModelFormatError(f"line 1: missing observation columns {missing_obs}")
    present_states = [n for n in model.state_names if n in cols]
    if present_states and len(present_states) != len(model.state_names):
        raise ModelFormatError("line 1: hidden section must list every state variable or none")
    cards = model.cardinalities
    data = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ModelFormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            t = int(row[0])
            values = {c: int(x) for c, x in zip(cols, row[1:])}
        except ValueError as exc:
            raise ModelFormatError(f"line {lineno}: {exc}") from None
        if t != len(data):
            raise ModelFormatError(f"line {lineno}: expected t={len(data)}, got {t}")
        for c, x in values.items():
            if not 0 <= x < cards[c]:
                raise ModelFormatError(f"line {lineno}, field {c!r}: value {x} out of range")
        data.append(values)
    hidden = (np.array([[d[n] for n in model.state_names] for d in data], dtype=np.int64).reshape(-1, len(model.state_names))
              if present_states else None)
    observed = np.array([[d[n] for n in model.obs_names] for d in data], dtype=np.int64).reshape(-1, len(model.obs_names))
    return Trajectory(model.state_names, model.obs_names, hidden, observed)


def load_trajectory(path, model: DbnModel) -> Trajectory:
    return loads_trajectory(Path(path).read_text(), model)


# --------------------------------------------------------------------------
# clusterings and tables


def load_clustering(path) -> Clustering:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return Clustering.parse(";".join(ln for ln in lines if ln and not ln.startswith("#")))


def dumps_table(table: ParticleTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*table.schema, "weight"])
    for row, weight in zip(table.rows.tolist(), table.weight_vector.tolist()):
        w.writerow([*row, repr(float(weight))])
    return buf.getvalue()


def loads_table(text: str) -> ParticleTable:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[-1] != "weight":
        raise ModelFormatError("line 1: last column must be 'weight'")
    rows, weights = [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        try:
            rows.append([int(x) for x in rec[:-1]])
            weights.append(float(rec[-1]))
        except ValueError as exc:
            raise ModelFormatError(f"line {lineno}: {exc}") from None
    schema = tuple(header[:-1])
    return ParticleTable(schema, np.array(rows, dtype=np.int64).reshape(-1, len(schema)), np.array(weights))


def dumps_beliefs(records: Sequence[tuple[int, float, Mapping[str, np.ndarray]]], names: Sequence[str],
                  cards: Mapping[str, int]) -> str:
    """Wide CSV: ``t,log_lik_increment,<var>=<value>...`` one row per slice."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "log_lik_increment", *(f"{n}={k}" for n in names for k in range(cards[n]))])
    for t, inc, marginals in records:
        w.writerow([t, repr(float(inc)), *(repr(float(p)) for n in names for p in marginals[n])])
    return buf.getvalue()
