"""Multivariate time-series ingestion, preprocessing, windowing and synthesis.

A :class:`Dataset` is a ``T x M`` matrix of reals with optional per-timestep
binary labels. Categorical columns are stored as integer codes into a sorted
token table so that every dataset can live in a single float matrix.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, PreconditionError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
MAX_CATEGORIES = 64


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable labeled multivariate time series."""

    values: np.ndarray
    labels: Optional[np.ndarray] = None
    feature_names: tuple[str, ...] = ()
    feature_kinds: tuple[str, ...] = ()
    categories: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1 and values.size == 0:
            values = values.reshape(0, len(self.feature_names))
        if values.ndim != 2:
            raise DataError(f"values must be a 2-D matrix, got shape {values.shape}")
        T, M = values.shape
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(M))
        kinds = tuple(self.feature_kinds) or (CONTINUOUS,) * M
        if len(names) != M or len(kinds) != M:
            raise DataError(f"expected {M} feature names/kinds, got {len(names)}/{len(kinds)}")
        if len(set(names)) != M:
            raise DataError("feature names must be unique")
        bad_kind = [k for k in kinds if k not in (CONTINUOUS, CATEGORICAL)]
        if bad_kind:
            raise DataError(f"unknown feature kind {bad_kind[0]!r}")
        if not np.all(np.isfinite(values)):
            row = int(np.argwhere(~np.isfinite(values))[0, 0])
            raise DataError(f"non-finite value in row {row}")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (T,):
                raise DataError(f"label vector has {labels.shape} entries, expected ({T},)")
            if not np.all((labels == 0) | (labels == 1)):
                raise DataError("labels must be 0 or 1")
            labels = _frozen(labels.astype(np.int8))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "feature_kinds", kinds)
        object.__setattr__(self, "categories", dict(self.categories))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]

    def rows(self, start: int, stop: int) -> "Dataset":
        """Contiguous sub-range ``[start, stop)`` sharing the feature metadata."""
        labels = None if self.labels is None else self.labels[start:stop]
        return Dataset(
            self.values[start:stop], labels, self.feature_names, self.feature_kinds, self.categories
        )

    @classmethod
    def from_columns(
        cls,
        columns: Mapping[str, Sequence],
        labels: Optional[Sequence[int]] = None,
        categorical: Iterable[str] = (),
    ) -> "Dataset":
        """Build a dataset from named columns; ``categorical`` columns hold raw tokens."""
        categorical = set(categorical)
        names, kinds, cols, cats = [], [], [], {}
        for name, col in columns.items():
            names.append(name)
            if name in categorical:
                tokens = [str(v) for v in col]
                table = tuple(sorted(set(tokens)))
                index = {tok: i for i, tok in enumerate(table)}
                cols.append([float(index[t]) for t in tokens])
                kinds.append(CATEGORICAL)
                cats[name] = table
            else:
                cols.append([float(v) for v in col])
                kinds.append(CONTINUOUS)
        T = len(cols[0]) if cols else 0
        values = np.array(cols, dtype=float).T.reshape(T, len(cols))
        return cls(values, None if labels is None else np.asarray(labels), tuple(names), tuple(kinds), cats)


@dataclass(frozen=True)
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray
    fitted_on: str = "train"

    def __post_init__(self) -> None:
        lo = _frozen(np.asarray(self.minimum, dtype=float))
        hi = _frozen(np.asarray(self.maximum, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DataError("min/max must be 1-D vectors of equal length")
        if np.any(lo > hi):
            raise DataError("normalization min exceeds max")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)


@dataclass(frozen=True)
class SplitSpec:
    validation_fraction: float = 0.25
    window: int = 12

    def __post_init__(self) -> None:
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.window < 1:
            raise ConfigError("window must be a positive integer")


@dataclass(frozen=True)
class WindowView:
    """The ``tau`` rows preceding ``index`` plus the row at ``index``."""

    past: np.ndarray
    current: np.ndarray
    index: int


AnomalyKind = Literal["spike", "mean_shift"]


@dataclass(frozen=True)
class Segment:
    start: int
    length: int
    kind: AnomalyKind


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic linear-Gaussian generator.

    ``system_seed`` fixes the dynamics and sensor matrices independently of
    ``seed`` (noise and anomaly draws), so train and test series can be drawn
    from one system. It defaults to ``seed``.
    """

    latent_dim: int = 3
    num_sensors: int = 8
    length: int = 1000
    anomaly_segments: tuple[Segment, ...] = ()
    noise_scale: float = 0.1
    seed: int = 0
    system_seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.latent_dim < 1 or self.num_sensors < 1 or self.length < 1:
            raise ConfigError("latent_dim, num_sensors and length must be positive")
        if not self.noise_scale > 0:
            raise ConfigError("noise_scale must be positive")
        if self.seed < 0 or (self.system_seed is not None and self.system_seed < 0):
            raise ConfigError("seeds must be non-negative")
        segs = tuple(s if isinstance(s, Segment) else Segment(*s) for s in self.anomaly_segments)
        object.__setattr__(self, "anomaly_segments", segs)
        for s in segs:
            if s.kind not in ("spike", "mean_shift"):
                raise ConfigError(f"segment {_fmt_segment(s)}: unknown kind {s.kind!r}")
            if s.start < 0 or s.length < 1 or s.start + s.length > self.length:
                raise ConfigError(
                    f"segment {_fmt_segment(s)} lies outside [0, {self.length})"
                )
        ordered = sorted(segs, key=lambda s: s.start)
        for a, b in zip(ordered, ordered[1:]):
            if b.start < a.start + a.length:
                raise ConfigError(f"segments {_fmt_segment(a)} and {_fmt_segment(b)} overlap")


def _fmt_segment(s: Segment) -> str:
    return f"({s.start}, {s.length}, {s.kind})"


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def load_csv(
    path: str | os.PathLike,
    label_column: Optional[str] = None,
    categorical: Iterable[str] = (),
) -> Dataset:
    """Read a headed, comma-separated file into a :class:`Dataset`.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV; the first row is the header.
    label_column : str, optional
        Column holding 0/1 labels. It is excluded from the feature matrix.
    categorical : iterable of str
        Columns whose cells are treated as tokens rather than numbers.

    Raises
    ------
    DataError
        Missing file, ragged rows, unparseable cells (row and column are
        named) or labels outside {0, 1}.
    """
    categorical = set(categorical)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if label_column is not None and label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header")
    missing = categorical - set(header)
    if missing:
        raise DataError(f"{path}: categorical column {sorted(missing)[0]!r} not in header")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")

    feature_cols = [j for j, h in enumerate(header) if h != label_column]
    label_idx = header.index(label_column) if label_column is not None else None
    tokens: dict[str, list[str]] = {header[j]: [] for j in feature_cols if header[j] in categorical}
    numeric = np.zeros((len(body), len(feature_cols)))
    labels = np.zeros(len(body), dtype=np.int8) if label_idx is not None else None

    for i, row in enumerate(body):
        rownum = i + 1
        if len(row) != len(header):
            raise DataError(
                f"{path}: row {rownum} (line {i + 2}) has {len(row)} fields, expected {len(header)}"
            )
        for k, j in enumerate(feature_cols):
            cell = row[j].strip()
            name = header[j]
            if name in tokens:
                tokens[name].append(cell)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: row {rownum} (line {i + 2}), column {name!r}: "
                    f"cannot parse {cell!r} as a number"
                ) from None
            if not math.isfinite(v):
                raise DataError(
                    f"{path}: row {rownum} (line {i + 2}), column {name!r}: non-finite value {cell!r}"
                )
            numeric[i, k] = v
        if label_idx is not None:
            cell = row[label_idx].strip()
            try:
                lv = float(cell)
            except ValueError:
                lv = float("nan")
            if lv not in (0.0, 1.0):
                raise DataError(
                    f"{path}: row {rownum} (line {i + 2}): label {cell!r} is not 0 or 1"
                )
            labels[i] = int(lv)

    names = tuple(header[j] for j in feature_cols)
    kinds = []
    cats = {}
    for k, name in enumerate(names):
        if name in tokens:
            table = tuple(sorted(set(tokens[name])))
            index = {t: c for c, t in enumerate(table)}
            numeric[:, k] = [index[t] for t in tokens[name]]
            cats[name] = table
            kinds.append(CATEGORICAL)
        else:
            kinds.append(CONTINUOUS)
    return Dataset(numeric, labels, names, tuple(kinds), cats)


def write_csv(dataset: Dataset, path: str | os.PathLike, label_column: str = "label") -> None:
    """Write ``dataset`` with a trailing label column (when labels exist).

    Reals are written with ``repr`` so a reload reproduces them exactly.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = list(dataset.feature_names)
        if dataset.labels is not None:
            header.append(label_column)
        w.writerow(header)
        for i in range(dataset.T):
            row = []
            for k, name in enumerate(dataset.feature_names):
                v = dataset.values[i, k]
                if dataset.feature_kinds[k] == CATEGORICAL:
                    row.append(dataset.categories[name][int(v)])
                else:
                    row.append(repr(float(v)))
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            w.writerow(row)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def one_hot_encode(
    dataset: Dataset,
    columns: Sequence[str],
    categories: Optional[Mapping[str, Sequence[str]]] = None,
) -> Dataset:
    """Replace each named categorical column by lexicographically ordered indicators.

    ``categories`` pins the token table per column (e.g. the one seen at
    training time); tokens outside it are rejected.
    """
    categories = dict(categories or {})
    for name in columns:
        if name not in dataset.feature_names:
            raise DataError(f"column {name!r} not found")
        k = dataset.feature_names.index(name)
        if dataset.feature_kinds[k] != CATEGORICAL:
            raise DataError(f"column {name!r} is not categorical")
        table = categories.get(name, dataset.categories[name])
        if len(table) > MAX_CATEGORIES:
            raise DataError(f"column {name!r} has {len(table)} categories (limit {MAX_CATEGORIES})")

    cols, names, kinds, cats = [], [], [], {}
    for k, name in enumerate(dataset.feature_names):
        col = dataset.values[:, k]
        if name not in columns:
            cols.append(col[:, None])
            names.append(name)
            kinds.append(dataset.feature_kinds[k])
            if name in dataset.categories:
                cats[name] = dataset.categories[name]
            continue
        own = dataset.categories[name]
        table = tuple(sorted(categories.get(name, own)))
        position = {tok: c for c, tok in enumerate(table)}
        codes = col.astype(int)
        try:
            remap = np.array([position[tok] for tok in own], dtype=int)
        except KeyError as exc:
            raise DataError(f"column {name!r}: unseen category {exc.args[0]!r}") from None
        mapped = remap[codes] if codes.size else codes
        block = np.zeros((dataset.T, len(table)))
        block[np.arange(dataset.T), mapped] = 1.0
        cols.append(block)
        names.extend(f"{name}={tok}" for tok in table)
        kinds.extend([CONTINUOUS] * len(table))
    values = np.hstack(cols) if cols else dataset.values
    return Dataset(values, dataset.labels, tuple(names), tuple(kinds), cats)


def fit_normalizer(train: Dataset, fitted_on: str = "train") -> NormalizationStats:
    """Per-feature min/max over ``train``."""
    if train.T < 1:
        raise DataError("cannot fit normalizer on an empty dataset")
    return NormalizationStats(train.values.min(axis=0), train.values.max(axis=0), fitted_on)


def _continuous_mask(dataset: Dataset, stats: NormalizationStats) -> np.ndarray:
    if stats.minimum.shape[0] != dataset.M:
        raise DataError(
            f"normalizer has {stats.minimum.shape[0]} features, dataset has {dataset.M}"
        )
    return np.array([k == CONTINUOUS for k in dataset.feature_kinds], dtype=bool)


def apply_normalizer(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    """Min-max scale continuous features; constant features map to 0. No clipping."""
    mask = _continuous_mask(dataset, stats)
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (dataset.values - stats.minimum) / safe, 0.0)
    values = np.where(mask, scaled, dataset.values)
    return Dataset(values, dataset.labels, dataset.feature_names, dataset.feature_kinds, dataset.categories)


def invert_normalizer(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    """Inverse of :func:`apply_normalizer` (constant features come back as their value)."""
    mask = _continuous_mask(dataset, stats)
    span = stats.maximum - stats.minimum
    restored = np.where(span > 0, dataset.values * span + stats.minimum, stats.minimum)
    values = np.where(mask, restored, dataset.values)
    return Dataset(values, dataset.labels, dataset.feature_names, dataset.feature_kinds, dataset.categories)


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Contiguous train/validation split of normal-only data."""
    if dataset.labels is not None and np.any(dataset.labels == 1):
        first = int(np.argmax(dataset.labels == 1))
        raise PreconditionError(
            f"training data must be normal-only; anomalous label at row {first}"
        )
    n_train = math.floor((1.0 - spec.validation_fraction) * dataset.T + 1e-9)
    return dataset.rows(0, n_train), dataset.rows(n_train, dataset.T)


def window_array(dataset: Dataset, tau: int) -> np.ndarray:
    """All past-windows stacked as a ``(T - tau, tau, M)`` read-only view."""
    if tau < 1:
        raise ConfigError("window size must be positive")
    if dataset.T <= tau:
        raise DataError(f"need T > tau, got T={dataset.T}, tau={tau}")
    # sliding_window_view puts the window axis last: (T-tau+1, M, tau)
    win = sliding_window_view(dataset.values, tau, axis=0)[:-1]
    return np.swapaxes(win, 1, 2)


def make_windows(dataset: Dataset, tau: int) -> list[WindowView]:
    """Windows for ``t = tau .. T-1`` in time order."""
    past = window_array(dataset, tau)
    return [
        WindowView(past[t - tau], dataset.values[t], t) for t in range(tau, dataset.T)
    ]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_BURN_IN = 200


def synth_system(latent_dim: int, num_sensors: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random stable transition (spectral radius 0.95) and sensor matrix."""
    G = rng.standard_normal((latent_dim, latent_dim))
    A = 0.95 * G / np.max(np.abs(np.linalg.eigvals(G)))
    C = rng.standard_normal((num_sensors, latent_dim)) / np.sqrt(latent_dim)
    return A, C


def synth_generate(config: SynthConfig) -> Dataset:
    """Linear-Gaussian sensor data with labeled injected anomalies.

    ``z_t = A z_{t-1} + eps``, ``x_t = C z_t + eta`` with
    ``eps ~ N(0, s^2 I)`` and ``eta ~ N(0, (s/2)^2 I)`` for ``s = noise_scale``.
    Inside a ``spike`` segment one random sensor per step gets ``+8 s``; a
    ``mean_shift`` segment adds ``4 s`` to every sensor.
    """
    rng = np.random.default_rng(config.seed)
    sys_rng = rng if config.system_seed is None else np.random.default_rng(config.system_seed)
    d, M, T, s = config.latent_dim, config.num_sensors, config.length, config.noise_scale
    A, C = synth_system(d, M, sys_rng)

    eps = rng.normal(0.0, s, size=(_BURN_IN + T, d))
    eta = rng.normal(0.0, s / 2.0, size=(T, M))
    z = np.zeros(d)
    latent = np.empty((T, d))
    for t in range(_BURN_IN + T):
        z = A @ z + eps[t]
        if t >= _BURN_IN:
            latent[t - _BURN_IN] = z
    x = latent @ C.T + eta

    labels = np.zeros(T, dtype=np.int8)
    for seg in sorted(config.anomaly_segments, key=lambda g: g.start):
        sl = slice(seg.start, seg.start + seg.length)
        labels[sl] = 1
        if seg.kind == "spike":
            sensors = rng.integers(0, M, size=seg.length)
            x[np.arange(seg.start, seg.start + seg.length), sensors] += 8.0 * s
        else:
            x[sl] += 4.0 * s
    names = tuple(f"sensor_{j}" for j in range(M))
    return Dataset(x, labels, names, (CONTINUOUS,) * M)
