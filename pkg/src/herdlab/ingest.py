"""
Loading real rating datasets and running the per-item analysis: chronological
grouping, filtering by rating count, per-item inference, the distribution of the
inferred herding strengths across items, and the recency-weight speed sweep.
"""

__all__ = [
    "ColumnMapping",
    "DatasetAnalysis",
    "DatasetRecord",
    "ItemAnalysis",
    "analyze_dataset",
    "filter_items",
    "from_records",
    "gamma_cdf",
    "load_csv",
    "speed_sweep",
    "speed_up",
    "speed_up_ratio",
    "write_analysis",
    "write_csv",
]

import json
import logging
import pathlib
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor

import equinox as eqx
import numpy as np
import pandas as pd

from .core import OpinionDistribution, RatingScale, RatingSequence, WeightRule
from .exceptions import DataFormatError, InsufficientDataError
from .herding import HerdingParams, SequenceSpec
from .inference import InferenceConfig, InferenceResult, infer
from .speed import phi
from .utils import n_threads

logger = logging.getLogger(__name__)

# Unparseable rows beyond this fraction of the file are a hard error:
MAX_BAD_FRACTION = 0.01

DEFAULT_C_GRID = tuple(np.round(np.arange(0.0, 4.0 + 1e-9, 0.1), 10))
DEFAULT_EVAL_INDEX = 5000

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n", ""}


class ColumnMapping(eqx.Module):
    """Names of the CSV columns holding each field."""

    item_id: str = eqx.field(static=True, default="item_id")
    order_key: str = eqx.field(static=True, default="order_key")
    rating: str = eqx.field(static=True, default="rating")
    misbehaving: str | None = eqx.field(static=True, default=None)

    @property
    def required(self) -> tuple[str, ...]:
        return (self.item_id, self.order_key, self.rating)


class DatasetRecord(eqx.Module):
    """One raw rating: the item, a sortable order key, and the level."""

    item_id: str = eqx.field(static=True)
    order_key: int | float | pd.Timestamp = eqx.field(static=True)
    rating: int = eqx.field(static=True)
    misbehaving: bool = eqx.field(static=True, default=False)


def _group(df: pd.DataFrame, scale: RatingScale) -> dict[str, RatingSequence]:
    # the row column breaks order-key ties by file order
    df = df.sort_values(["item_id", "order_key", "row"], kind="stable")
    return {
        str(item): RatingSequence(
            scale,
            group["rating"].to_numpy(dtype=int),
            group["misbehaving"].to_numpy(dtype=bool),
        )
        for item, group in df.groupby("item_id", sort=True)
    }


def _drop_out_of_range(df: pd.DataFrame, scale: RatingScale) -> pd.DataFrame:
    in_range = df["rating"].between(1, scale.M)
    n_out = int((~in_range).sum())
    if n_out:
        logger.warning(
            "Skipping %d rating(s) outside the scale 1..%d", n_out, scale.M
        )
    return df[in_range]


def from_records(
    records: Iterable[DatasetRecord], scale: RatingScale
) -> dict[str, RatingSequence]:
    """Group in-memory records into per-item chronological sequences."""
    df = pd.DataFrame(
        [
            {
                "item_id": r.item_id,
                "order_key": r.order_key,
                "rating": int(r.rating),
                "misbehaving": bool(r.misbehaving),
            }
            for r in records
        ],
        columns=["item_id", "order_key", "rating", "misbehaving"],
    )
    df["row"] = np.arange(len(df))
    return _group(_drop_out_of_range(df, scale), scale)


def _parse_order_key(raw: pd.Series) -> pd.Series:
    """Numeric keys when they parse, otherwise ISO 8601 timestamps (as epoch seconds)."""
    numeric = pd.to_numeric(raw, errors="coerce")
    if numeric.notna().mean() >= 1.0 - MAX_BAD_FRACTION:
        return numeric

    stamps = pd.to_datetime(raw, errors="coerce", utc=True, format="ISO8601")
    if stamps.notna().sum() <= numeric.notna().sum():
        return numeric
    return (stamps - pd.Timestamp(0, tz="UTC")).dt.total_seconds()


def _parse_flags(raw: pd.Series) -> pd.Series:
    lowered = raw.str.strip().str.lower()
    flags = pd.Series(pd.NA, index=raw.index, dtype="boolean")
    flags[lowered.isin(_TRUE)] = True
    flags[lowered.isin(_FALSE)] = False
    return flags


def load_csv(
    path: str | pathlib.Path,
    scale: RatingScale,
    columns: ColumnMapping | None = None,
) -> dict[str, RatingSequence]:
    """
    Read a UTF-8, comma-separated ratings file into per-item sequences.

    Each item's ratings are sorted by the order key (numeric, or timestamps), ties
    keeping their order in the file. Ratings that are integers outside ``1..M`` are
    skipped with a warning. Rows whose fields cannot be parsed are skipped with a
    warning too, unless they make up more than 1% of the file.

    Parameters
    ----------
    path
        The CSV file; it needs a header row.
    scale
        The rating scale.
    columns (optional)
        Column names; defaults to ``item_id``, ``order_key``, ``rating``.

    Raises
    ------
    DataFormatError
        If a column is missing or too many rows are unparseable (the message lists
        the 1-based file line numbers).
    """
    columns = columns if columns is not None else ColumnMapping()
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")

    wanted = list(columns.required)
    if columns.misbehaving is not None:
        wanted.append(columns.misbehaving)
    missing = [c for c in wanted if c not in raw.columns]
    if missing:
        msg = f"{path}: missing column(s) {missing}; found {list(raw.columns)}"
        raise DataFormatError(msg)

    df = pd.DataFrame(
        {
            "item_id": raw[columns.item_id].str.strip(),
            "order_key": _parse_order_key(raw[columns.order_key].str.strip()),
            "rating": pd.to_numeric(raw[columns.rating].str.strip(), errors="coerce"),
            "row": np.arange(len(raw)),
        }
    )
    if columns.misbehaving is not None:
        df["misbehaving"] = _parse_flags(raw[columns.misbehaving])
    else:
        df["misbehaving"] = False

    bad = (
        (df["item_id"] == "")
        | df["order_key"].isna()
        | df["rating"].isna()
        | (df["rating"] != df["rating"].round())
        | df["misbehaving"].isna()
    )
    n_bad = int(bad.sum())
    if n_bad:
        # header is line 1
        lines = (df.index[bad] + 2).tolist()
        if n_bad > MAX_BAD_FRACTION * len(df):
            shown = ", ".join(str(x) for x in lines[:20])
            more = f" and {n_bad - 20} more" if n_bad > 20 else ""
            msg = (
                f"{path}: {n_bad} of {len(df)} rows could not be parsed "
                f"(lines {shown}{more})"
            )
            raise DataFormatError(msg)
        logger.warning("%s: skipping %d unparseable row(s): %s", path, n_bad, lines)

    df = df[~bad].astype({"rating": int, "misbehaving": bool})
    sequences = _group(_drop_out_of_range(df, scale), scale)
    logger.info("Loaded %d ratings of %d items from %s", len(df), len(sequences), path)
    return sequences


def write_csv(
    sequences: Mapping[str, RatingSequence],
    path: str | pathlib.Path,
    columns: ColumnMapping | None = None,
    include_flags: bool = True,
) -> None:
    """
    Write sequences in the format :func:`load_csv` reads, with order keys 1..N per
    item and (optionally) a misbehavior flag column.
    """
    columns = columns if columns is not None else ColumnMapping()
    flag_col = columns.misbehaving or "misbehaving"

    frames = []
    for item_id, seq in sequences.items():
        n = len(seq)
        frame = {
            columns.item_id: [item_id] * n,
            columns.order_key: np.arange(1, n + 1),
            columns.rating: np.asarray(seq.ratings),
        }
        if include_flags:
            frame[flag_col] = np.asarray(seq.misbehavior_flags).astype(int)
        frames.append(pd.DataFrame(frame))

    out = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    out.to_csv(path, index=False, encoding="utf-8")


def filter_items(
    sequences: Mapping[str, RatingSequence], min_ratings: int
) -> dict[str, RatingSequence]:
    """Keep the items with at least ``min_ratings`` ratings."""
    if min_ratings < 1:
        msg = f"min_ratings must be a positive integer, got {min_ratings}"
        raise ValueError(msg)

    kept = {k: v for k, v in sequences.items() if len(v) >= min_ratings}
    logger.info(
        "Kept %d of %d items with at least %d ratings",
        len(kept),
        len(sequences),
        min_ratings,
    )
    return kept


class ItemAnalysis(eqx.Module):
    item_id: str = eqx.field(static=True)
    n_ratings: int = eqx.field(static=True)
    result: InferenceResult

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "n_ratings": self.n_ratings} | (
            self.result.to_dict()
        )


class DatasetAnalysis(eqx.Module):
    """
    Output of :func:`analyze_dataset`.

    ``cdf`` has columns ``gamma_tilde`` and ``cumulative_fraction``; ``sweep`` has
    columns ``c``, ``i``, ``phi``.
    """

    items: list[ItemAnalysis]
    cdf: pd.DataFrame
    mean_gamma_tilde: float
    sweep: pd.DataFrame
    best_c: float
    speed_up: float


def gamma_cdf(results: Sequence[ItemAnalysis]) -> pd.DataFrame:
    """Empirical CDF of the inferred herding strengths of converged items."""
    values = np.sort(
        [float(r.result.gamma_tilde_hat) for r in results if r.result.converged]
    )
    if values.size == 0:
        msg = "No converged items to build a distribution from"
        raise InsufficientDataError(msg)
    return pd.DataFrame(
        {
            "gamma_tilde": values,
            "cumulative_fraction": np.arange(1, values.size + 1) / values.size,
        }
    )


def speed_sweep(
    gamma_tilde: float,
    c_grid: Sequence[float] = DEFAULT_C_GRID,
    index: int = DEFAULT_EVAL_INDEX,
    scale: RatingScale | int = 5,
) -> pd.DataFrame:
    """
    phi at one rating index for power-law rules w_i = i^c over a grid of c, with
    constant herding strength ``gamma_tilde`` and no review selection (eta = 0).
    """
    scale = scale if isinstance(scale, RatingScale) else RatingScale(scale)
    alpha = OpinionDistribution.uniform(scale)
    rows = [
        {
            "c": float(c),
            "i": int(index),
            "phi": phi(
                HerdingParams(
                    alpha,
                    SequenceSpec.constant(gamma_tilde),
                    SequenceSpec.constant(0.0),
                    WeightRule.power_law(c),
                ),
                index,
            ),
        }
        for c in c_grid
    ]
    return pd.DataFrame(rows)


def speed_up_ratio(phi_best: float, phi_baseline: float) -> float:
    """Relative speed-up ``phi_best / phi_baseline - 1``."""
    if phi_baseline <= 0:
        msg = f"The baseline phi must be positive, got {phi_baseline}"
        raise ValueError(msg)
    return phi_best / phi_baseline - 1.0


def speed_up(sweep: pd.DataFrame) -> tuple[float, float]:
    """
    The best exponent in a sweep and its speed-up over the unweighted rule (c = 0).

    Returns
    -------
    best_c
    ratio
    """
    baseline = sweep.loc[np.isclose(sweep["c"], 0.0), "phi"]
    if baseline.empty:
        msg = "The sweep has no c = 0 row to compare against"
        raise ValueError(msg)
    best = sweep.loc[sweep["phi"].idxmax()]
    return float(best["c"]), speed_up_ratio(float(best["phi"]), float(baseline.iloc[0]))


def analyze_dataset(
    sequences: Mapping[str, RatingSequence],
    rule: WeightRule,
    config: InferenceConfig | None = None,
    c_grid: Sequence[float] = DEFAULT_C_GRID,
    eval_index: int = DEFAULT_EVAL_INDEX,
) -> DatasetAnalysis:
    """
    Infer (alpha, gamma_tilde) for every item, summarize the inferred herding
    strengths, and sweep the recency exponent at their mean.

    Items are analyzed concurrently on a thread pool (see ``HERDLAB_THREADS``).
    Items whose inference did not converge are reported and left out of the
    distribution and the mean.

    Raises
    ------
    InsufficientDataError
        If there are no items, or none converged.
    """
    config = config if config is not None else InferenceConfig()
    if not sequences:
        msg = "No items to analyze"
        raise InsufficientDataError(msg)

    names = list(sequences)

    def run(name: str) -> ItemAnalysis:
        seq = sequences[name]
        return ItemAnalysis(name, len(seq), infer(seq, rule, config))

    with ThreadPoolExecutor(max_workers=n_threads()) as pool:
        items = list(pool.map(run, names))

    failed = [a.item_id for a in items if not a.result.converged]
    if failed:
        logger.warning(
            "Inference did not converge for %d item(s), excluding them: %s",
            len(failed),
            failed,
        )

    cdf = gamma_cdf(items)
    mean_gamma = float(cdf["gamma_tilde"].mean())
    scale = next(iter(sequences.values())).scale
    sweep = speed_sweep(mean_gamma, c_grid, eval_index, scale)
    best_c, ratio = speed_up(sweep)
    logger.info(
        "Mean gamma_tilde over %d items is %.4f; best c=%.2f speeds up by %.1f%%",
        len(cdf),
        mean_gamma,
        best_c,
        100 * ratio,
    )
    return DatasetAnalysis(items, cdf, mean_gamma, sweep, best_c, ratio)


def write_analysis(analysis: DatasetAnalysis, out_dir: str | pathlib.Path) -> None:
    """
    Write ``items.jsonl``, ``cdf.csv``, ``sweep.csv`` and ``summary.json`` (item
    count, mean gamma_tilde, best c, speed-up in percent) under ``out_dir``.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with (out_dir / "items.jsonl").open("w", encoding="utf-8") as f:
        for item in analysis.items:
            f.write(json.dumps(item.to_dict()) + "\n")

    analysis.cdf.to_csv(out_dir / "cdf.csv", index=False)
    analysis.sweep.to_csv(out_dir / "sweep.csv", index=False)

    summary = {
        "items": len(analysis.items),
        "converged_items": len(analysis.cdf),
        "mean_gamma_tilde": analysis.mean_gamma_tilde,
        "best_c": analysis.best_c,
        "speed_up_percent": 100 * analysis.speed_up,
    }
    with (out_dir / "summary.json").open("w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
