"""Transfer-record parsing, asset classification and daily panel aggregation."""
import csv
import enum
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .model import STREAMS

CATEGORIES = ("external", "internal", "erc20", "erc721", "erc1155")
DIRECTIONS = ("buy", "sell")
NATIVE_TOKEN = "ETH"
TRANSFER_COLUMNS = ("wallet_id", "day_index", "direction", "category", "token_id", "amount")
COVARIATE_COLUMNS = ("ethprice", "rf6m")


class AssetClass(str, enum.Enum):
    ETH = "Eth"
    STABLECOIN = "Stablecoin"
    OTHER = "Other"


# (direction, asset class) -> stream name
_STREAM_OF = {
    ("sell", AssetClass.ETH): "eth_sale",
    ("buy", AssetClass.ETH): "eth_purchase",
    ("sell", AssetClass.STABLECOIN): "stable_sale",
    ("buy", AssetClass.STABLECOIN): "stable_purchase",
}


class IngestError(ValueError):
    """Fatal input problem (unreadable file, schema mismatch, empty panel)."""


@dataclass(frozen=True)
class TransferRecord:
    wallet_id: str
    day_index: int
    direction: str
    category: str
    token_id: str
    amount: float
    asset_class: AssetClass

    @property
    def stream(self):
        return _STREAM_OF.get((self.direction, self.asset_class))


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str
    row: dict


@dataclass
class ParsedTransfers:
    records: list
    rejects: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def default_registry():
    with resources.files("zigpanel").joinpath("data/stablecoins.json").open() as fh:
        return load_registry_data(json.load(fh))


def load_registry_data(data):
    return {str(k).lower(): str(v) for k, v in data.items()}


def load_registry(path=None):
    """Stablecoin registry (token address -> symbol). ``None`` gives the seven defaults."""
    if path is None:
        return default_registry()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read stablecoin registry {path}: {exc}") from exc
    if not isinstance(data, dict) or not data:
        raise IngestError(f"stablecoin registry {path} must be a nonempty JSON object")
    return load_registry_data(data)


def classify_asset(token_id, category, registry):
    if not registry:
        raise ValueError("stablecoin registry is empty")
    if category in ("external", "internal"):
        return AssetClass.ETH
    if category == "erc20" and str(token_id).lower() in registry:
        return AssetClass.STABLECOIN
    return AssetClass.OTHER


def _parse_row(row, registry):
    missing = [c for c in TRANSFER_COLUMNS if row.get(c) in (None, "")]
    if missing:
        return None, f"missing field {missing[0]}"
    category = str(row["category"]).strip().lower()
    if category not in CATEGORIES:
        return None, f"unknown category {row['category']!r}"
    direction = str(row["direction"]).strip().lower()
    if direction not in DIRECTIONS:
        return None, f"unknown direction {row['direction']!r}"
    try:
        day = int(str(row["day_index"]).strip())
    except ValueError:
        return None, f"bad day_index {row['day_index']!r}"
    if day < 1:
        return None, "day_index below 1"
    try:
        amount = float(row["amount"])
    except (TypeError, ValueError):
        return None, f"non-numeric amount {row['amount']!r}"
    if not math.isfinite(amount):
        return None, "non-finite amount"
    if amount < 0:
        return None, "negative amount"
    token = str(row["token_id"]).strip()
    if category in ("external", "internal"):
        token = NATIVE_TOKEN
    rec = TransferRecord(
        wallet_id=str(row["wallet_id"]).strip(),
        day_index=day,
        direction=direction,
        category=category,
        token_id=token.lower() if token != NATIVE_TOKEN else token,
        amount=amount,
        asset_class=classify_asset(token, category, registry),
    )
    return rec, None


def parse_transfers(path, format=None, registry=None):
    """Read a CSV or JSON-lines transfer export.

    Malformed rows are returned in ``.rejects`` with a reason instead of
    being dropped silently.
    """
    registry = default_registry() if registry is None else registry
    if format is None:
        format = "jsonl" if str(path).endswith((".jsonl", ".ndjson")) else "csv"
    if format not in ("csv", "jsonl"):
        raise IngestError(f"unsupported transfer format {format!r}")
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestError(f"cannot read transfer file {path}: {exc}") from exc
    out = ParsedTransfers([])
    with fh:
        if format == "csv":
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise IngestError(f"transfer file {path} is empty")
            header = [c.strip() for c in reader.fieldnames]
            absent = [c for c in TRANSFER_COLUMNS if c not in header]
            if absent:
                raise IngestError(f"transfer file {path} lacks columns {absent}")
            rows = ((i + 2, {k.strip(): v for k, v in r.items() if k is not None}) for i, r in enumerate(reader))
        else:
            rows = _jsonl_rows(fh, out)
        for line, row in rows:
            rec, reason = _parse_row(row, registry)
            if rec is None:
                out.rejects.append(Reject(line, reason, dict(row)))
            else:
                out.records.append(rec)
    return out


def _jsonl_rows(fh, out):
    for i, raw in enumerate(fh, start=1):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as exc:
            out.rejects.append(Reject(i, f"invalid JSON: {exc.msg}", {"raw": raw.rstrip()}))
            continue
        if not isinstance(row, dict):
            out.rejects.append(Reject(i, "row is not an object", {"raw": raw.rstrip()}))
            continue
        yield i, row


@dataclass
class Panel:
    """Daily wallet panel: four ``m x n`` response streams plus covariates."""

    wallet_ids: list
    n_days: int
    streams: dict
    counts: np.ndarray
    covariates: np.ndarray = None
    covariate_names: tuple = COVARIATE_COLUMNS
    covariate_stats: dict = field(default_factory=dict)
    activity_threshold: int = 5

    @property
    def m(self):
        return len(self.wallet_ids)

    @property
    def n(self):
        return self.n_days

    def with_stream(self, name, values):
        streams = dict(self.streams)
        streams[name] = np.asarray(values, dtype=float)
        return Panel(list(self.wallet_ids), self.n_days, streams, self.counts, self.covariates,
                     tuple(self.covariate_names), dict(self.covariate_stats), self.activity_threshold)

    def with_covariates(self, matrix, stats, names=COVARIATE_COLUMNS):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape[0] != self.n_days:
            raise IngestError(f"covariates cover {matrix.shape[0]} days, panel has {self.n_days}")
        return Panel(list(self.wallet_ids), self.n_days, dict(self.streams), self.counts, matrix,
                     tuple(names), dict(stats), self.activity_threshold)


def build_panel(records, n_days, activity_threshold=5):
    """Aggregate records into daily per-wallet sums for the four streams.

    Every record counts toward the activity threshold, including NFT and
    unregistered-token transfers that feed no stream. Cell sums use exact
    summation so the result does not depend on record order.
    """
    if n_days < 1:
        raise IngestError("n_days must be at least 1")
    n_tx = defaultdict(int)
    cells = defaultdict(list)
    per_day = defaultdict(int)
    for rec in records:
        if rec.day_index > n_days:
            raise IngestError(f"record day_index {rec.day_index} exceeds n_days {n_days} (wallet {rec.wallet_id})")
        n_tx[rec.wallet_id] += 1
        per_day[rec.wallet_id, rec.day_index] += 1
        stream = rec.stream
        if stream is not None:
            cells[rec.wallet_id, stream, rec.day_index].append(rec.amount)
    kept = sorted(w for w, c in n_tx.items() if c >= activity_threshold)
    if not kept:
        raise IngestError(
            f"no wallets reach the activity threshold of {activity_threshold} "
            f"({len(n_tx)} wallets seen, max {max(n_tx.values(), default=0)} transfers)")
    row = {w: i for i, w in enumerate(kept)}
    m = len(kept)
    streams = {s: np.zeros((m, n_days)) for s in STREAMS}
    for (w, s, d), amounts in cells.items():
        if w in row:
            streams[s][row[w], d - 1] = math.fsum(amounts)
    counts = np.zeros((m, n_days), dtype=np.int64)
    for (w, d), c in per_day.items():
        if w in row:
            counts[row[w], d - 1] = c
    return Panel(kept, int(n_days), streams, counts, activity_threshold=int(activity_threshold))


def load_covariates(path, n_days):
    """Read ``day_index, ethprice, rf6m``; forward-fill rf6m gaps and z-score both columns.

    Standardization uses the sample standard deviation (ddof=1). Returns the
    ``n_days x 2`` standardized matrix and ``{name: {"mean", "sd"}}``.
    """
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestError(f"cannot read covariate file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError(f"covariate file {path} is empty")
        lower = {c.strip().lower(): c for c in reader.fieldnames}
        absent = [c for c in ("day_index",) + COVARIATE_COLUMNS if c not in lower]
        if absent:
            raise IngestError(f"covariate file {path} lacks columns {absent}")
        raw = {name: [None] * n_days for name in COVARIATE_COLUMNS}
        for r in reader:
            try:
                day = int(r[lower["day_index"]])
            except (TypeError, ValueError):
                raise IngestError(f"bad day_index {r[lower['day_index']]!r} in {path}") from None
            if not 1 <= day <= n_days:
                continue
            for name in COVARIATE_COLUMNS:
                cell = (r.get(lower[name]) or "").strip()
                if cell and cell.lower() not in ("na", "nan", "null", "."):
                    try:
                        raw[name][day - 1] = float(cell)
                    except ValueError:
                        raise IngestError(f"non-numeric {name} value {cell!r} on day {day}") from None
    eth = raw["ethprice"]
    gaps = [d + 1 for d, v in enumerate(eth) if v is None]
    if gaps:
        raise IngestError(f"ethprice missing on day(s) {gaps[:5]}; price series must be daily-complete")
    rf = raw["rf6m"]
    if rf[0] is None:
        raise IngestError("rf6m missing on day 1; nothing to forward-fill from")
    for d in range(1, n_days):
        if rf[d] is None:
            rf[d] = rf[d - 1]
    matrix = np.column_stack([np.asarray(eth, dtype=float), np.asarray(rf, dtype=float)])
    return standardize(matrix, COVARIATE_COLUMNS)


def standardize(matrix, names):
    matrix = np.asarray(matrix, dtype=float)
    out = np.empty_like(matrix)
    stats = {}
    for j, name in enumerate(names):
        col = matrix[:, j]
        mean = float(col.mean())
        sd = float(col.std(ddof=1)) if len(col) > 1 else 0.0
        if not sd > 0:
            raise IngestError(f"degenerate covariate {name}: zero variance")
        out[:, j] = (col - mean) / sd
        stats[name] = {"mean": mean, "sd": sd}
    return out, stats


def unstandardize(matrix, stats, names):
    matrix = np.asarray(matrix, dtype=float)
    return np.column_stack([matrix[:, j] * stats[n]["sd"] + stats[n]["mean"] for j, n in enumerate(names)])


# -- panel serialization -----------------------------------------------------

def _fmt(x):
    return repr(float(x))


def save_panel(panel, directory):
    """Write one CSV per stream (wallet rows x day columns), counts, covariates and a manifest."""
    os.makedirs(directory, exist_ok=True)
    days = [str(d) for d in range(1, panel.n_days + 1)]
    for name in STREAMS:
        with open(os.path.join(directory, f"{name}.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["wallet_id"] + days)
            for wid, vals in zip(panel.wallet_ids, panel.streams[name]):
                w.writerow([wid] + [_fmt(v) for v in vals])
    with open(os.path.join(directory, "counts.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wallet_id"] + days)
        for wid, vals in zip(panel.wallet_ids, panel.counts):
            w.writerow([wid] + [str(int(v)) for v in vals])
    if panel.covariates is not None:
        with open(os.path.join(directory, "covariates.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day_index"] + list(panel.covariate_names))
            for d, vals in enumerate(panel.covariates, start=1):
                w.writerow([d] + [_fmt(v) for v in vals])
    manifest = {
        "m": panel.m,
        "n": panel.n_days,
        "wallet_ids": list(panel.wallet_ids),
        "streams": list(STREAMS),
        "activity_threshold": panel.activity_threshold,
        "covariate_names": list(panel.covariate_names) if panel.covariates is not None else [],
        "covariate_stats": panel.covariate_stats,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_matrix(path, wallet_ids, n, dtype=float):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != n + 1:
            raise IngestError(f"{path}: expected {n} day columns, found {len(header) - 1}")
        rows = list(reader)
    if [r[0] for r in rows] != list(wallet_ids):
        raise IngestError(f"{path}: wallet rows do not match the manifest")
    return np.array([[dtype(v) for v in r[1:]] for r in rows], dtype=dtype).reshape(len(wallet_ids), n)


def load_panel(directory):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read panel manifest {path}: {exc}") from exc
    ids, n = man["wallet_ids"], int(man["n"])
    if len(ids) != int(man["m"]):
        raise IngestError(f"{path}: m does not match the wallet id list")
    streams = {s: _read_matrix(os.path.join(directory, f"{s}.csv"), ids, n) for s in STREAMS}
    counts = _read_matrix(os.path.join(directory, "counts.csv"), ids, n, dtype=int).astype(np.int64)
    names = tuple(man.get("covariate_names") or ())
    covariates = None
    cov_path = os.path.join(directory, "covariates.csv")
    if names:
        with open(cov_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header[1:]) != names:
                raise IngestError(f"{cov_path}: columns {header[1:]} do not match the manifest")
            covariates = np.array([[float(v) for v in r[1:]] for r in reader]).reshape(n, len(names))
    return Panel(ids, n, streams, counts, covariates, names or COVARIATE_COLUMNS,
                 man.get("covariate_stats", {}), int(man.get("activity_threshold", 5)))
