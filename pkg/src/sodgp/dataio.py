"""Datasets, standardization, train/test splits and on-disk formats.

Model files are JSON documents. Arrays are stored as base64 little-endian
float64 (or int64) buffers, so a save/load round trip is exact, and the
payload carries a format version and a SHA-256 checksum.
"""
from __future__ import annotations

import base64
import csv
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ChecksumMismatch, InvalidFraction, MissingTarget, ParseError, VersionMismatch
from .kernel import SqExpParams
from .model import Architecture, DgpModel, LayerState, ModelConfig
from .numerics import JitterPolicy
from .subset import SubsetIndex

FORMAT_NAME = "sodgp-model"
FORMAT_VERSION = 1
HISTORY_COLUMNS = ("iteration", "elbo_total", "loglik_sbar", "loglik_s", "kl_first_layer",
                   "kl_intermediate", "kl_last_layer", "wall_ms")


@dataclass
class Standardization:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    warnings: list = field(default_factory=list)

    @classmethod
    def fit(cls, x, y, feature_names=None):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x_mean = x.mean(axis=0)
        x_scale = x.std(axis=0)
        notes = []
        for j in np.flatnonzero(~(x_scale > 1e-12 * np.maximum(1.0, np.abs(x_mean)))):
            name = feature_names[j] if feature_names else f"column {j}"
            notes.append(f"{name} is constant; its scale is set to 1")
            x_scale[j] = 1.0
        y_mean = float(y.mean())
        y_scale = float(y.std())
        if not y_scale > 1e-12 * max(1.0, abs(y_mean)):
            notes.append("target is constant; its scale is set to 1")
            y_scale = 1.0
        for note in notes:
            warnings.warn(note, stacklevel=2)
        return cls(x_mean, x_scale, y_mean, y_scale, notes)

    def transform_x(self, x):
        return (np.asarray(x, dtype=float) - self.x_mean) / self.x_scale

    def transform_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_scale

    def inverse_x(self, x):
        return np.asarray(x, dtype=float) * self.x_scale + self.x_mean

    def inverse_y(self, y):
        return np.asarray(y, dtype=float) * self.y_scale + self.y_mean


@dataclass
class Dataset:
    """Raw inputs and targets, with the standardization used to feed the model."""

    x: np.ndarray
    y: np.ndarray
    feature_names: Optional[list] = None
    standardization: Optional[Standardization] = None

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def input_dim(self):
        return self.x.shape[1]

    def with_fitted_standardization(self):
        return Dataset(self.x, self.y, self.feature_names,
                       Standardization.fit(self.x, self.y, self.feature_names))

    @property
    def x_std(self):
        return self.x if self.standardization is None else self.standardization.transform_x(self.x)

    @property
    def y_std(self):
        return self.y if self.standardization is None else self.standardization.transform_y(self.y)


def _parse_float(cell, line, column):
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"column {column}: non-numeric value {cell.strip()!r}", line) from None
    if not np.isfinite(value):
        raise ParseError(f"column {column}: non-finite value {cell.strip()!r}", line)
    return value


def load_csv(path, target=None, header=True):
    """Read a comma-separated numeric table; ``target`` is a column name or index.

    The last column is the target when none is given. Rows with the wrong
    number of fields or non-numeric cells raise :class:`ParseError` naming the
    line (1-based, header included).
    """
    with open(path, newline="") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh))]
    rows = [(ln, row) for ln, row in rows if row and any(c.strip() for c in row)]
    if not rows:
        raise ParseError("file is empty")
    if header:
        names = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    else:
        names = [str(j) for j in range(len(rows[0][1]))]
    width = len(names)
    if isinstance(target, str) and not target.lstrip("-").isdigit():
        if target not in names:
            raise MissingTarget(f"target column {target!r} not found in {names}")
        t_idx = names.index(target)
    else:
        t_idx = width - 1 if target is None else int(target)
        if not -width <= t_idx < width:
            raise MissingTarget(f"target index {t_idx} out of range for {width} columns")
        t_idx %= width
    if not rows:
        raise ParseError("no data rows")
    table = np.empty((len(rows), width))
    for r, (ln, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"expected {width} fields, got {len(row)}", ln)
        for j, cell in enumerate(row):
            table[r, j] = _parse_float(cell, ln, j + 1)
    keep = [j for j in range(width) if j != t_idx]
    return Dataset(table[:, keep], table[:, t_idx], [names[j] for j in keep])


def split(dataset, test_fraction=0.1, seed=0):
    """Seeded shuffle into (train, test); both carry the training-set standardization."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidFraction(f"test fraction must lie in (0, 1), got {test_fraction}")
    n = dataset.n
    n_test = int(round(n * test_fraction))
    n_test = min(max(n_test, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    train = Dataset(dataset.x[train_idx], dataset.y[train_idx], dataset.feature_names)
    train = train.with_fitted_standardization()
    test = Dataset(dataset.x[test_idx], dataset.y[test_idx], dataset.feature_names,
                   train.standardization)
    return train, test


def save_csv(path, dataset, target_name="y"):
    names = dataset.feature_names or [f"x{j}" for j in range(dataset.input_dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names) + [target_name])
        for xi, yi in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


# ---------------------------------------------------------------- model files

def _enc(a):
    a = np.asarray(a)
    kind = "<i8" if np.issubdtype(a.dtype, np.integer) else "<f8"
    buf = np.ascontiguousarray(a, dtype=kind).tobytes()
    return {"dtype": kind, "shape": list(a.shape), "data": base64.b64encode(buf).decode("ascii")}


def _dec(obj):
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()


def _canonical(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _model_payload(model):
    std = model.standardization
    layers = []
    for layer in model.layers:
        layers.append({
            "log_variance": _enc(layer.kernel.log_variance),
            "log_lengthscales": _enc(layer.kernel.log_lengthscales),
            "log_noise_var": _enc(layer.log_noise_var),
            "q_mean": _enc(layer.q_mean),
            "q_tril": _enc(layer.q_tril),
            "mean_weights": None if layer.mean_weights is None else _enc(layer.mean_weights),
        })
    arch = model.architecture
    cfg = model.config
    return {
        "architecture": {"input_dim": arch.input_dim, "hidden_layers": arch.hidden_layers,
                         "hidden_width": arch.hidden_width},
        "config": {"ard": cfg.ard, "train_hidden_noise": cfg.train_hidden_noise,
                   "linear_mean": cfg.linear_mean, "jitter_ladder": list(cfg.jitter.ladder)},
        "subset": {"s": _enc(model.subset.s), "n": int(model.subset.n)},
        "standardization": None if std is None else {
            "x_mean": _enc(std.x_mean), "x_scale": _enc(std.x_scale),
            "y_mean": _enc(np.array(std.y_mean)), "y_scale": _enc(np.array(std.y_scale)),
            "warnings": list(std.warnings)},
        "x_subset": _enc(model.x_subset),
        "y_subset": _enc(model.y_subset),
        "layers": layers,
        "iterations_trained": int(model.iterations_trained),
    }


def save_model(model, path):
    payload = _model_payload(model)
    doc = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "payload": payload,
           "checksum": hashlib.sha256(_canonical(payload).encode()).hexdigest()}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def load_model(path):
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"model file is not valid JSON ({exc.msg})", exc.lineno) from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ParseError("not a model file")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {doc.get('version')}, "
                              f"expected {FORMAT_VERSION}")
    payload = doc.get("payload")
    if payload is None or hashlib.sha256(_canonical(payload).encode()).hexdigest() != doc.get("checksum"):
        raise ChecksumMismatch("model file checksum does not match its contents")
    a = payload["architecture"]
    c = payload["config"]
    arch = Architecture(a["input_dim"], a["hidden_layers"], a["hidden_width"])
    cfg = ModelConfig(c["ard"], c["train_hidden_noise"], c["linear_mean"],
                      JitterPolicy(tuple(c["jitter_ladder"])))
    layers = []
    for entry in payload["layers"]:
        weights = entry["mean_weights"]
        layers.append(LayerState(
            SqExpParams(_dec(entry["log_variance"]), _dec(entry["log_lengthscales"])),
            _dec(entry["log_noise_var"]), _dec(entry["q_mean"]), _dec(entry["q_tril"]),
            None if weights is None else _dec(weights)))
    s = payload["standardization"]
    std = None if s is None else Standardization(
        _dec(s["x_mean"]), _dec(s["x_scale"]), float(_dec(s["y_mean"])),
        float(_dec(s["y_scale"])), list(s["warnings"]))
    subset = SubsetIndex.from_indices(_dec(payload["subset"]["s"]), payload["subset"]["n"])
    return DgpModel(arch, layers, subset, std, _dec(payload["x_subset"]),
                    _dec(payload["y_subset"]), cfg, payload["iterations_trained"])


# ---------------------------------------------------------------- history / metrics

def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history.rows():
            writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def read_history(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in reader]


def write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v
