"""Append-only, schema-versioned CSV artifacts and the run manifest.

The four contract files carry fixed columns followed by ``model, seed, ts,
schema`` (gauge_stats already has ``seed`` in its payload). Companion files
add detail the contract columns leave out; their layouts are listed in the
README.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from wilson.errors import SchemaMismatch

SCHEMA_VERSION = 1
_ID_RE = re.compile(r"^[A-Za-z0-9._:-]*$")
_TS_FMT = "%Y-%m-%dT%H:%M:%SZ"


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime(_TS_FMT)


def parse_ts(ts: str) -> datetime:
    return datetime.strptime(ts, _TS_FMT).replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class CsvSchema:
    name: str
    columns: tuple[tuple[str, type], ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.columns)

    @property
    def header(self) -> str:
        return ",".join(self.names) + "\n"


_CTX = (("model", str), ("seed", int), ("ts", str), ("schema", int))

HOLONOMY = CsvSchema("holonomy.csv", (("position", int), ("layer", int), ("kappa", float)) + _CTX)
COMMUTATOR = CsvSchema("commutator.csv", (("i", int), ("j", int), ("value", float), ("block", str)) + _CTX)
IR = CsvSchema("ir.csv", (("input_id", str), ("IR", float), ("tol", float), ("label", int)) + _CTX)
GAUGE_STATS = CsvSchema(
    "gauge_stats.csv",
    (("layer", int), ("seed", int), ("kendall_tau", float), ("probe_var", float), ("model", str), ("ts", str), ("schema", int)),
)
CONTRACT_SCHEMAS = (HOLONOMY, COMMUTATOR, IR, GAUGE_STATS)

# companions (invented layouts)
HOLONOMY_LOOPS = CsvSchema(
    "holonomy_loops.csv",
    (("input_id", str), ("i", int), ("j", int), ("layer", int), ("kappa", float), ("mode", str), ("probes", int)),
)
COMMUTATOR_PAIRS = CsvSchema(
    "commutator_pairs.csv",
    (("batch_id", str), ("module_a", str), ("module_b", str), ("delta_fro", float), ("drift", float)),
)
GAUGE_PREPOST = CsvSchema(
    "gauge_prepost.csv",
    (("phase", str), ("layer", int), ("seed", int), ("kendall_tau", float), ("probe_var", float), ("cosine_dist", float)),
)
DRIFT_CURVE = CsvSchema("rope_drift.csv", (("layer", int), ("offset", float), ("distance", float), ("metric", str)))
ROC_POINTS = CsvSchema("roc.csv", (("score", str), ("fpr", float), ("tpr", float)))
PREDICTION = CsvSchema(
    "prediction.csv",
    (("score", str), ("auc", float), ("ap", float), ("brier", float), ("ece", float), ("auc_lo", float), ("auc_hi", float), ("null", str)),
)
OVERHEAD = CsvSchema("overhead.csv", (("category", str), ("percent", float)))
MASK_CURVE = CsvSchema("mask_curve.csv", (("n", int), ("epsilon_pi", float)))


def _format(value, typ: type) -> str:
    if value is None:
        return ""
    if typ is float:
        return repr(float(value))
    if typ is int:
        return str(int(value))
    s = str(value)
    if not _ID_RE.match(s):
        raise ValueError(f"string field {s!r} has characters outside [A-Za-z0-9._:-]")
    return s


def _parse(text: str, typ: type):
    if text == "":
        return None
    return typ(text)


class CsvWriter:
    """Append-only writer for one schema.

    An existing file must start with the exact header, and its rows must carry
    the same schema version; otherwise the writer refuses to open. Rows are
    only ever appended.
    """

    def __init__(self, path: str | Path, schema: CsvSchema, version: int = SCHEMA_VERSION):
        self.path = Path(path)
        self.schema = schema
        self.version = version
        self._lock = threading.Lock()
        if self.path.exists() and self.path.stat().st_size > 0:
            with open(self.path, newline="") as fh:
                header = fh.readline()
                last = None
                for line in fh:
                    if line.strip():
                        last = line
            if header != schema.header:
                raise SchemaMismatch(f"{self.path.name}: header {header.strip()!r} != {schema.header.strip()!r}")
            if last is not None and "schema" in schema.names:
                found = int(last.rstrip("\n").split(",")[schema.names.index("schema")])
                if found != version:
                    raise SchemaMismatch(f"{self.path.name}: existing rows use schema {found}, writer uses {version}")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                fh.write(schema.header)

    def append(self, rows: Iterable[Mapping | Sequence]) -> int:
        lines = []
        for row in rows:
            if isinstance(row, Mapping):
                if "schema" in self.schema.names and row.get("schema", self.version) != self.version:
                    raise SchemaMismatch(f"row schema {row['schema']} != writer schema {self.version}")
                values = [row.get(c, self.version if c == "schema" else None) for c in self.schema.names]
            else:
                values = list(row)
                if len(values) != len(self.schema.columns):
                    raise ValueError(f"expected {len(self.schema.columns)} values, got {len(values)}")
            lines.append(",".join(_format(v, t) for v, (_, t) in zip(values, self.schema.columns)) + "\n")
        with self._lock, open(self.path, "a", newline="") as fh:
            fh.writelines(lines)
        return len(lines)


def read_csv(path: str | Path, schema: CsvSchema) -> list[dict]:
    with open(path, newline="") as fh:
        header = fh.readline()
        if header != schema.header:
            raise SchemaMismatch(f"{Path(path).name}: unexpected header {header.strip()!r}")
        out = []
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            out.append({c: _parse(p, t) for (c, t), p in zip(schema.columns, parts)})
    return out


# ---------------------------------------------------------------------------
# row builders


@dataclass(frozen=True)
class RowContext:
    model: str
    seed: int
    ts: str = field(default_factory=utc_now)
    schema: int = SCHEMA_VERSION

    def as_dict(self) -> dict:
        return {"model": self.model, "seed": self.seed, "ts": self.ts, "schema": self.schema}


def holonomy_rows(scores, ctx: RowContext) -> list[dict]:
    return [{"position": s.loop.i, "layer": s.loop.layer, "kappa": s.kappa, **ctx.as_dict()} for s in scores]


def holonomy_loop_rows(scores) -> list[dict]:
    return [
        {"input_id": s.input_id, "i": s.loop.i, "j": s.loop.j, "layer": s.loop.layer, "kappa": s.kappa, "mode": s.mode, "probes": s.probes_used}
        for s in scores
    ]


def commutator_rows(records, block: str, ctx: RowContext) -> list[dict]:
    return [{"i": r.index_a, "j": r.index_b, "value": r.delta_fro, "block": block, **ctx.as_dict()} for r in records]


def ir_rows(records, ctx: RowContext) -> list[dict]:
    return [{"input_id": r.input_id, "IR": r.IR, "tol": r.tol, "label": r.label, **ctx.as_dict()} for r in records]


def gauge_rows(stats, ctx: RowContext) -> list[dict]:
    base = {"model": ctx.model, "ts": ctx.ts, "schema": ctx.schema}
    return [{"layer": s.layer, "seed": s.seed, "kendall_tau": s.kendall_tau, "probe_var": s.probe_var, **base} for s in stats]


def write_holonomy(path, scores, ctx: RowContext) -> int:
    return CsvWriter(path, HOLONOMY, ctx.schema).append(holonomy_rows(scores, ctx))


def write_commutator(path, records, block: str, ctx: RowContext) -> int:
    return CsvWriter(path, COMMUTATOR, ctx.schema).append(commutator_rows(records, block, ctx))


def write_ir(path, records, ctx: RowContext) -> int:
    return CsvWriter(path, IR, ctx.schema).append(ir_rows(records, ctx))


def write_gauge_stats(path, stats, ctx: RowContext) -> int:
    return CsvWriter(path, GAUGE_STATS, ctx.schema).append(gauge_rows(stats, ctx))


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class RunManifest:
    model_hash: str
    seeds: list[int]
    knobs: dict
    thresholds: dict
    schema: int = SCHEMA_VERSION
    ts: str = field(default_factory=utc_now)
    model_spec: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def write_manifest(path: str | Path, manifest: RunManifest) -> RunManifest:
    """Write once. A manifest already on disk is kept if it names the same model and schema."""
    path = Path(path)
    if path.exists():
        existing = RunManifest.from_json(path.read_text())
        if existing.model_hash != manifest.model_hash or existing.schema != manifest.schema:
            raise SchemaMismatch(f"{path} belongs to model {existing.model_hash[:12]} schema {existing.schema}")
        return existing
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.to_json())
    return manifest


def load_manifest(path: str | Path) -> RunManifest:
    return RunManifest.from_json(Path(path).read_text())


def expire_check(manifest: RunManifest, now: datetime | str, ttl_minutes: float, current_model_hash: str) -> str:
    """``"stale"`` when the model hash changed or the manifest is older than the TTL."""
    if manifest.model_hash != current_model_hash:
        return "stale"
    now = parse_ts(now) if isinstance(now, str) else now
    age_min = (now - parse_ts(manifest.ts)).total_seconds() / 60.0
    return "stale" if age_min > ttl_minutes else "fresh"
