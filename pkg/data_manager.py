"""
Data Management Module
Synthetic panel generation, panel CSV ingestion, chronological windowing and
run-directory bookkeeping (manifests, content hashes, artifact export).
"""

import pandas as pd
import numpy as np
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Dict, Any, Tuple, Sequence, Union
import hashlib
import json
import logging

from numpy.lib.stride_tricks import sliding_window_view

from config import ColumnConfig, DatasetSchema, FREQUENCIES, SyntheticSpec
from errors import ConfigurationError, ContractError, DataError, SchemaError
from ml_engine.forecaster import ForecastBatch
from ml_engine.static_encoder import StaticFeatureVector

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


@dataclass
class Dataset:
    """
    Regular panel: one row per entity (sorted by id), one column per time step.

    ``vocabularies[name][code]`` is the category string for ``code``. Each
    cardinality is the declared category count (or, undeclared, the
    vocabulary size) plus one; the last code is reserved for unseen categories.
    """
    entity_ids: np.ndarray                     # [N]
    timestamps: pd.DatetimeIndex               # [T]
    series: np.ndarray                         # [N, T]
    statics: np.ndarray                        # [N, F] codes
    static_names: List[str]
    vocabularies: Dict[str, List[str]]
    frequency: str = "daily"
    category_params: Optional[pd.DataFrame] = None
    declared_cardinalities: Optional[List[Optional[int]]] = None

    @property
    def n_entities(self) -> int:
        return int(self.series.shape[0])

    @property
    def length(self) -> int:
        return int(self.series.shape[1])

    @property
    def cardinalities(self) -> List[int]:
        declared = self.declared_cardinalities or [None] * len(self.static_names)
        return [(len(self.vocabularies[name]) if d is None else int(d)) + 1
                for name, d in zip(self.static_names, declared)]

    def static_vector(self, rows: Optional[np.ndarray] = None) -> StaticFeatureVector:
        values = self.statics if rows is None else self.statics[rows]
        return StaticFeatureVector(values, self.cardinalities, list(self.static_names))

    def decode_statics(self) -> pd.DataFrame:
        """Category strings per entity"""
        columns = {}
        for f, name in enumerate(self.static_names):
            labels = list(self.vocabularies[name])
            columns[name] = [labels[c] if c < len(labels) else ColumnConfig.UNKNOWN_CATEGORY
                             for c in self.statics[:, f]]
        return pd.DataFrame(columns, index=pd.Index(self.entity_ids, name=ColumnConfig.ENTITY_ID))

    def to_frame(self) -> pd.DataFrame:
        """Long panel: entity_id, timestamp, target, static columns (as strings)"""
        N, T = self.series.shape
        frame = pd.DataFrame({
            ColumnConfig.ENTITY_ID: np.repeat(self.entity_ids, T),
            ColumnConfig.TIMESTAMP: np.tile(self.timestamps.strftime("%Y-%m-%d"), N),
            ColumnConfig.TARGET: self.series.reshape(-1),
        })
        decoded = self.decode_statics()
        for name in self.static_names:
            frame[name] = np.repeat(decoded[name].to_numpy(), T)
        return frame

    def schema(self) -> DatasetSchema:
        return DatasetSchema(
            ColumnConfig.ENTITY_ID, ColumnConfig.TIMESTAMP, ColumnConfig.TARGET, self.frequency,
            list(self.static_names), [c - 1 for c in self.cardinalities],
        )


# =============================================================================
# SYNTHETIC DATA
# =============================================================================

def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """
    Category-driven seasonal panel.

    Entity e with category c (of each informative variable) follows
        y_t = base + sum_f amp_{f,c} sin(2 pi (t + phase_{f,c}) / period_{f,c}) + slope_e t + noise,
    where base is the mean of the informative categories' integer levels.
    Values are clipped at 0 and rounded. Category codes are the only signal
    shared across entities; every category is assigned to at least two entities.
    """
    if spec.n_entities < 2 * max(spec.n_categories):
        raise ConfigurationError("each category needs at least two entities")
    rng = np.random.default_rng(spec.seed)
    N, T, F = spec.n_entities, spec.length, len(spec.n_categories)
    informative = list(range(F)) if spec.informative is None else sorted(spec.informative)

    rows, statics = [], np.zeros((N, F), dtype=np.int64)
    for f, n_cat in enumerate(spec.n_categories):
        bases = np.round(rng.uniform(*spec.base_range, size=n_cat))
        amplitudes = rng.uniform(*spec.amplitude_range, size=n_cat)
        periods = rng.choice(spec.periods, size=n_cat)
        phases = rng.uniform(0, 1, size=n_cat) * periods
        statics[:, f] = rng.permutation(np.arange(N) % n_cat)
        for c in range(n_cat):
            rows.append({
                "variable": f"category_{f}", "category": f"cat_{c:02d}", "code": c,
                "base": bases[c], "amplitude": amplitudes[c], "period": int(periods[c]),
                "phase": phases[c], "informative": f in informative,
            })
    params = pd.DataFrame(rows)

    t = np.arange(T, dtype=np.float64)
    level = np.zeros((N, 1))
    seasonal = np.zeros((N, T))
    for f in informative:
        p = params[params["variable"] == f"category_{f}"].set_index("code")
        codes = statics[:, f]
        level += p.loc[codes, "base"].to_numpy()[:, None] / len(informative)
        seasonal += p.loc[codes, "amplitude"].to_numpy()[:, None] * np.sin(
            2 * np.pi * (t[None, :] + p.loc[codes, "phase"].to_numpy()[:, None])
            / p.loc[codes, "period"].to_numpy()[:, None]
        )
    slopes = rng.uniform(*spec.slope_range, size=N)
    noise = rng.normal(0.0, spec.noise_sigma, size=(N, T)) if spec.noise_sigma > 0 else np.zeros((N, T))
    series = np.round(np.clip(level + seasonal + slopes[:, None] * t[None, :] + noise, 0.0, None))

    width = max(3, len(str(N - 1)))
    names = [f"category_{f}" for f in range(F)]
    vocabularies = {names[f]: [f"cat_{c:02d}" for c in range(n)] for f, n in enumerate(spec.n_categories)}
    timestamps = pd.date_range(spec.start_date, periods=T, freq=FREQUENCIES[spec.frequency])
    logger.info("generated synthetic panel: %d entities x %d steps, %d static variables", N, T, F)
    return Dataset(
        np.array([f"E{i:0{width}d}" for i in range(N)]), timestamps, series, statics, names,
        vocabularies, spec.frequency, params,
    )


# =============================================================================
# CSV INGESTION
# =============================================================================

def save_vocabulary(vocabularies: Dict[str, List[str]], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(vocabularies, f, indent=2, sort_keys=True)


def load_vocabulary(path: Union[str, Path]) -> Dict[str, List[str]]:
    with open(path, "r", encoding="utf-8") as f:
        return {k: list(v) for k, v in json.load(f).items()}


def encode_categories(values: Sequence[str], vocabulary: Sequence[str],
                      unknown: Optional[int] = None) -> np.ndarray:
    """Codes by vocabulary position; unseen values map to the reserved index (default len(vocabulary))"""
    lookup = {v: i for i, v in enumerate(vocabulary)}
    unknown = len(vocabulary) if unknown is None else unknown
    return np.array([lookup.get(v, unknown) for v in values], dtype=np.int64)


def load_csv(path: Union[str, Path], schema: DatasetSchema,
             vocabularies: Optional[Dict[str, List[str]]] = None) -> Dataset:
    """
    Load a long panel CSV onto a regular time grid.

    Args:
        path: CSV with entity, timestamp, target and static columns
        schema: Column names, frequency and declared cardinalities
        vocabularies: Existing category vocabularies to reuse (built when omitted)

    Returns:
        Dataset with interior gaps forward-filled and leading gaps set to 0
    """
    entity, ts, target = schema.entity_column, schema.timestamp_column, schema.target_column
    text_columns = [entity] + list(schema.static_columns)
    try:
        df = pd.read_csv(path, dtype={c: str for c in text_columns}, keep_default_na=False,
                         na_values={target: ["", "NA", "NaN", "nan"]})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse CSV: {exc}") from exc

    required = [entity, ts, target] + list(schema.static_columns)
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}; found {list(df.columns)}")

    try:
        df[ts] = pd.to_datetime(df[ts])
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: unparseable timestamps: {exc}") from exc

    dup = df.duplicated([entity, ts], keep=False)
    if dup.any():
        lines = (df.index[dup] + 2).tolist()   # header is line 1
        raise DataError(f"{path}: duplicate (entity, timestamp) rows at lines {lines[:20]}")

    freq = FREQUENCIES[schema.frequency]
    grid = pd.date_range(df[ts].min(), df[ts].max(), freq=freq)
    off_grid = ~df[ts].isin(grid)
    if off_grid.any():
        lines = (df.index[off_grid] + 2).tolist()
        raise DataError(f"{path}: timestamps off the {schema.frequency} grid at lines {lines[:20]}")

    df = df.sort_values([entity, ts], kind="mergesort")
    observed = df.dropna(subset=[target])
    wide = (observed.pivot(index=entity, columns=ts, values=target)
            .reindex(index=sorted(df[entity].unique()), columns=grid))
    leading = wide.ffill(axis=1).isna()
    n_leading = int(leading.to_numpy().sum())
    n_interior = int(wide.isna().to_numpy().sum()) - n_leading
    series = wide.ffill(axis=1).fillna(0.0).to_numpy(dtype=np.float64)
    logger.info("%s: %d entities x %d steps, %d interior gaps forward-filled, %d leading zeros",
                path, len(wide), len(grid), n_interior, n_leading)

    per_entity = df.groupby(entity, sort=True)[list(schema.static_columns)]
    if schema.static_columns and (per_entity.nunique() > 1).any().any():
        varying = per_entity.nunique().columns[(per_entity.nunique() > 1).any()].tolist()
        raise DataError(f"{path}: static columns {varying} vary within an entity")
    static_frame = per_entity.first().reindex(wide.index)

    vocabularies = dict(vocabularies or {})
    codes = np.zeros((len(wide), len(schema.static_columns)), dtype=np.int64)
    for f, name in enumerate(schema.static_columns):
        if name not in vocabularies:
            vocabularies[name] = sorted(v for v in static_frame[name].unique()
                                        if v != ColumnConfig.UNKNOWN_CATEGORY)
        declared = schema.cardinalities[f] if schema.cardinalities else None
        if declared is not None and len(vocabularies[name]) > declared:
            raise DataError(
                f"static column '{name}' has {len(vocabularies[name])} categories, {declared} declared"
            )
        unknown = len(vocabularies[name]) if declared is None else int(declared)
        codes[:, f] = encode_categories(static_frame[name].tolist(), vocabularies[name], unknown)

    return Dataset(
        wide.index.to_numpy().astype(str), grid, series, codes, list(schema.static_columns),
        {n: vocabularies[n] for n in schema.static_columns}, schema.frequency,
        declared_cardinalities=list(schema.cardinalities) if schema.cardinalities else None,
    )


# =============================================================================
# WINDOWING
# =============================================================================

def _normalizers(series: np.ndarray, train_end: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-entity mean and standard deviation of the training segment"""
    if train_end <= 0:
        return np.zeros(series.shape[0]), np.ones(series.shape[0])
    segment = series[:, :train_end]
    loc = segment.mean(axis=1)
    scale = segment.std(axis=1)
    scale = np.where(scale > 1e-8, scale, 1.0)
    return loc, scale


def _windows(dataset: Dataset, start: int, end: int, L_in: int, L_out: int,
             loc: np.ndarray, scale: np.ndarray, label: str) -> ForecastBatch:
    """Stride-1 windows inside [start, end), ordered by entity id then start"""
    size = L_in + L_out
    N = dataset.n_entities
    segment_len = max(0, end - start)
    count = max(0, segment_len - size + 1)
    if count == 0:
        if N and segment_len > 0:
            logger.warning("%s split: %d entities skipped (segment of %d < %d steps)",
                           label, N, segment_len, size)
        return ForecastBatch(
            np.zeros((0, L_in)), np.zeros((0, L_out)), dataset.static_vector(np.zeros(0, dtype=np.int64)),
            np.zeros(0, dtype=str), np.zeros(0, dtype=np.int64), np.zeros(0), np.ones(0),
        )
    windows = sliding_window_view(dataset.series[:, start:end], size, axis=1)   # [N, W, size]
    windows = windows.reshape(N * count, size)
    rows = np.repeat(np.arange(N), count)
    return ForecastBatch(
        windows[:, :L_in].copy(), windows[:, L_in:].copy(), dataset.static_vector(rows),
        dataset.entity_ids[rows], np.tile(np.arange(start, start + count), N), loc[rows], scale[rows],
    )


def split_and_window(dataset: Dataset, L_in: int, L_out: int,
                     boundaries: Tuple[int, int]) -> Tuple[ForecastBatch, ForecastBatch, ForecastBatch]:
    """
    Chronological train/validation/test windows.

    Targets of the training windows lie in [0, train_end), validation targets
    in [train_end, val_end) and test targets in [val_end, T). Validation and
    test windows may read up to L_in steps of history before their split.

    Returns:
        (train, val, test) ForecastBatch, possibly empty
    """
    train_end, val_end = int(boundaries[0]), int(boundaries[1])
    T = dataset.length
    if not 0 <= train_end <= val_end <= T:
        raise ContractError(f"boundaries {boundaries} must satisfy 0 <= train_end <= val_end <= {T}")
    if L_in < 1 or L_out < 1:
        raise ContractError("L_in and L_out must be positive")
    loc, scale = _normalizers(dataset.series, train_end)
    train = _windows(dataset, 0, train_end, L_in, L_out, loc, scale, "train")
    val = _windows(dataset, max(0, train_end - L_in), val_end, L_in, L_out, loc, scale, "validation")
    test = _windows(dataset, max(0, val_end - L_in), T, L_in, L_out, loc, scale, "test")
    logger.info("windows: train %d, validation %d, test %d", len(train), len(val), len(test))
    return train, val, test


def target_range(batch: ForecastBatch, L_in: int, L_out: int) -> Tuple[np.ndarray, np.ndarray]:
    """First and one-past-last target index of every window"""
    first = batch.starts + L_in
    return first, first + L_out


# =============================================================================
# RUN DIRECTORIES
# =============================================================================

def blob_hash(content: bytes) -> str:
    """Git-style content hash: sha1 of 'blob <len>\\0' + content"""
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def config_hash(config: Dict[str, Any]) -> str:
    return blob_hash(json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8"))


class DataManager:
    """
    Owns one output root: run directories, manifests and CSV artifacts.

    Everything written is a pure function of the run's config and inputs:
    no timestamps, fixed float formatting, sorted keys.
    """

    def __init__(self, data_dir: Union[str, Path] = "outputs"):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)

    def run_id(self, command: str, config: Dict[str, Any]) -> str:
        name = config.get("run", {}).get("name", "run")
        return f"{name}-{command}-{config_hash(config)[:10]}"

    def run_dir(self, run_id: str) -> Path:
        path = self.data_dir / run_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_manifest(self, run_dir: Path, command: str, config: Dict[str, Any], seed: int,
                       inputs: Sequence[Union[str, Path]] = (),
                       artifacts: Sequence[str] = ()) -> Dict[str, Any]:
        """Config snapshot, seed and git-style hashes of the config and every input file"""
        manifest = {
            "command": command,
            "seed": seed,
            "config": config,
            "config_hash": config_hash(config),
            "inputs": {str(p): blob_hash(Path(p).read_bytes()) for p in inputs},
            "artifacts": sorted(artifacts),
        }
        with open(Path(run_dir) / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        return manifest

    @staticmethod
    def write_frame(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return Path(path)

    def save_dataset(self, dataset: Dataset, directory: Union[str, Path]) -> List[Path]:
        """data.csv, vocabulary.json and (for synthetic panels) category_params.csv"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = [self.write_frame(dataset.to_frame(), directory / "data.csv")]
        save_vocabulary(dataset.vocabularies, directory / "vocabulary.json")
        written.append(directory / "vocabulary.json")
        if dataset.category_params is not None:
            written.append(self.write_frame(dataset.category_params, directory / "category_params.csv"))
        return written
