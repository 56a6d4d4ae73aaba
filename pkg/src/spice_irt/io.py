"""Reading responses, features and run configs; writing run outputs."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .diagnostics import ChainSummary, FitReport
from .errors import ValidationError
from .families import get_family
from .model import BlockSpec, ResponseData, ResponseRecord
from .regression import BlockDesign, PriorSpec
from .sampler import CalibrationData, Constraints, RegressionFix, SamplerConfig, normalize_weights

REQUIRED_COLUMNS = ("person_id", "item_id", "response")


def fmt(x: float) -> str:
    """Shortest round-trip text for a float."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


# ---------------------------------------------------------------------------
# responses


@dataclass
class ParsedResponses:
    records: list[ResponseRecord]
    person_ids: list[str]
    item_ids: list[str]
    weights: np.ndarray

    def to_data(self) -> ResponseData:
        return ResponseData(
            person=[r.person_index for r in self.records],
            item=[r.item_index for r in self.records],
            value=[r.value for r in self.records],
            n_persons=len(self.person_ids),
            n_items=len(self.item_ids),
            person_weight=self.weights,
        )


def parse_responses(path, allow_duplicates: bool = False) -> ParsedResponses:
    """Read a delimited response file with columns person_id, item_id, response
    and an optional weight.

    Ids are re-indexed densely in order of first appearance.  Person weights
    must agree across a person's rows and are normalized so they sum to the
    number of persons with positive weight.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        has_weight = "weight" in header
        person_index: dict[str, int] = {}
        item_index: dict[str, int] = {}
        seen: dict[tuple[int, int], int] = {}
        raw_weight: dict[int, float] = {}
        records = []
        for row_no, row in enumerate(reader, start=2):
            pid, iid = row["person_id"], row["item_id"]
            if pid is None or iid is None or pid == "" or iid == "":
                raise ValidationError(f"{path}: row {row_no}: empty id", rows=[row_no])
            try:
                value = float(row["response"])
            except (TypeError, ValueError):
                raise ValidationError(
                    f"{path}: row {row_no}: non-numeric response {row['response']!r}", rows=[row_no]
                ) from None
            if not math.isfinite(value):
                raise ValidationError(f"{path}: row {row_no}: response is not finite", rows=[row_no])
            i = person_index.setdefault(pid, len(person_index))
            j = item_index.setdefault(iid, len(item_index))
            if not allow_duplicates:
                if (i, j) in seen:
                    raise ValidationError(
                        f"{path}: row {row_no}: duplicate (person, item) pair ({pid}, {iid}), "
                        f"first seen in row {seen[(i, j)]}",
                        rows=[row_no],
                    )
                seen[(i, j)] = row_no
            w = 1.0
            if has_weight and row["weight"] not in (None, ""):
                try:
                    w = float(row["weight"])
                except ValueError:
                    raise ValidationError(f"{path}: row {row_no}: non-numeric weight", rows=[row_no]) from None
                if not (w >= 0 and math.isfinite(w)):
                    raise ValidationError(f"{path}: row {row_no}: negative weight {w}", rows=[row_no])
            if i in raw_weight and raw_weight[i] != w:
                raise ValidationError(f"{path}: row {row_no}: person {pid} has conflicting weights", rows=[row_no])
            raw_weight[i] = w
            records.append(ResponseRecord(len(records), i, j, value, w))
    if not records:
        raise ValidationError(f"{path}: no responses")
    weights = normalize_weights([raw_weight[i] for i in range(len(person_index))])
    records = [ResponseRecord(r.obs_index, r.person_index, r.item_index, r.value, float(weights[r.person_index])) for r in records]
    return ParsedResponses(records, list(person_index), list(item_index), weights)


def write_responses(path, data: ResponseData, person_ids, item_ids, with_weight: bool = False):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(REQUIRED_COLUMNS) + (["weight"] if with_weight else []))
        for p, j, v in zip(data.person, data.item, data.value):
            row = [person_ids[p], item_ids[j], fmt(v) if not float(v).is_integer() else str(int(v))]
            if with_weight:
                row.append(fmt(data.person_weight[p]))
            w.writerow(row)


# ---------------------------------------------------------------------------
# features


def check_full_rank(X: np.ndarray, names: list[str]) -> None:
    """Raise naming the first column that is linearly dependent on earlier ones."""
    rank = 0
    for c in range(X.shape[1]):
        r = np.linalg.matrix_rank(X[:, : c + 1])
        if r == rank:
            raise ValidationError(f"feature matrix is rank-deficient: column {names[c]!r} is dependent")
        rank = r


def parse_features(path, unit_ids: list[str], intercept: bool = True, id_column: str = "id"):
    """Design matrix for the units of one block.

    Returns ``(X0, column_names)``.  Without a file the design is a single
    intercept column.
    """
    if path is None:
        return np.ones((len(unit_ids), 1)), ["intercept"]
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        if id_column not in header:
            raise ValidationError(f"{path}: missing id column {id_column!r}")
        cols = [c for c in header if c != id_column]
        rows = {}
        for row_no, row in enumerate(reader, start=2):
            try:
                rows[row[id_column]] = [float(row[c]) for c in cols]
            except (TypeError, ValueError):
                raise ValidationError(f"{path}: row {row_no}: non-numeric feature", rows=[row_no]) from None
    missing = [u for u in unit_ids if u not in rows]
    if missing:
        raise ValidationError(f"{path}: no feature row for {len(missing)} unit(s), e.g. {missing[0]!r}")
    extra = set(rows) - set(unit_ids)
    if extra:
        raise ValidationError(f"{path}: {len(extra)} row(s) for units outside the block, e.g. {sorted(extra)[0]!r}")
    F = np.array([rows[u] for u in unit_ids], dtype=float).reshape(len(unit_ids), len(cols))
    if intercept:
        X, names = np.hstack([np.ones((len(unit_ids), 1)), F]), ["intercept"] + cols
    else:
        X, names = F, cols
    if X.shape[1] == 0:
        raise ValidationError(f"{path}: no feature columns and no intercept")
    check_full_rank(X, names)
    return X, names


def write_features(path, unit_ids, F: np.ndarray, names=None):
    names = names or [f"x{c + 1}" for c in range(F.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id"] + list(names))
        for u, row in zip(unit_ids, F):
            w.writerow([u] + [fmt(v) for v in row])


# ---------------------------------------------------------------------------
# config


@dataclass
class CalibrationConfig:
    """A parsed run configuration with paths resolved against its file."""

    source: Path | None
    responses: Path
    blocks: list[dict]
    fixed_units: list[dict]
    sampler: SamplerConfig
    output_dir: Path
    allow_duplicates: bool = False
    raw: dict = field(default_factory=dict)

    def echo(self) -> dict:
        """Complete configuration with defaults filled in, for the manifest."""
        return {
            "data": {"responses": str(self.responses), "allow_duplicates": self.allow_duplicates},
            "blocks": self.blocks,
            "fixed_units": self.fixed_units,
            "sampler": asdict(self.sampler),
            "output": {"dir": str(self.output_dir)},
        }


_SAMPLER_KEYS = {f.name for f in fields(SamplerConfig)}


def load_config(path, overrides: dict | None = None) -> CalibrationConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {str(path)!r} not found")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return config_from_dict(raw, base=path.parent, overrides=overrides, source=path)


def config_from_dict(raw: dict, base=".", overrides: dict | None = None, source=None) -> CalibrationConfig:
    base = Path(base)
    data = raw.get("data", {})
    if "responses" not in data:
        raise ValidationError("config needs data.responses")
    responses = (base / data["responses"]).resolve()
    if not responses.is_file():
        raise ValidationError(f"responses file {str(responses)!r} not found")
    blocks = []
    for n, b in enumerate(raw.get("blocks", [])):
        b = dict(b)
        b.setdefault("id", n)
        if b.get("side") not in ("person", "item"):
            raise ValidationError(f"block {b['id']}: side must be 'person' or 'item'")
        for key in ("features", "members_file"):
            if b.get(key):
                p = (base / b[key]).resolve()
                if not p.is_file():
                    raise ValidationError(f"block {b['id']}: {key} {str(p)!r} not found")
                b[key] = str(p)
        b.setdefault("intercept", True)
        b.setdefault("members", "rest")
        if b["side"] == "item":
            if "family" not in b:
                raise ValidationError(f"item block {b['id']} needs a family")
            b["family"] = get_family(b["family"]).tag
            b.setdefault("person_dim", 0)
        blocks.append(b)
    sides = {b["side"] for b in blocks}
    if sides != {"person", "item"}:
        raise ValidationError("config needs at least one person block and one item block")
    sampler_raw = dict(raw.get("sampler", {}))
    unknown = set(sampler_raw) - _SAMPLER_KEYS
    if unknown:
        raise ValidationError(f"unknown sampler setting(s): {', '.join(sorted(unknown))}")
    out_dir = raw.get("output", {}).get("dir", "out")
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key == "out":
            out_dir = val
        else:
            sampler_raw[key] = val
    if "worker_count" not in (overrides or {}) or (overrides or {}).get("worker_count") is None:
        env = os.environ.get("SPICE_THREADS")
        if env and "worker_count" not in sampler_raw:
            sampler_raw["worker_count"] = int(env)
    sampler = SamplerConfig(**sampler_raw)
    out = Path(out_dir)
    if not out.is_absolute():
        out = (base / out).resolve() if overrides is None or overrides.get("out") is None else out.resolve()
    return CalibrationConfig(
        source=Path(source) if source else None,
        responses=responses,
        blocks=blocks,
        fixed_units=[dict(u) for u in raw.get("fixed_units", [])],
        sampler=sampler,
        output_dir=out,
        allow_duplicates=bool(data.get("allow_duplicates", False)),
        raw=raw,
    )


def _read_members(spec: dict) -> list[str]:
    with open(spec["members_file"], newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        col = spec.get("members_id_column", "id")
        filt = spec.get("members_column")
        want = spec.get("members_value")
        out = []
        for row in reader:
            if filt is not None and str(row.get(filt)) != str(want):
                continue
            out.append(row[col])
    return out


def _prior_for(spec: dict, p: int, K: int) -> PriorSpec:
    pr = spec.get("prior", {})
    n = p * K
    b0 = np.asarray(pr.get("b0", np.zeros(n)), dtype=float).ravel(order="F")
    if b0.size == 1 and n > 1:
        b0 = np.full(n, float(b0[0]))
    if "omega0" in pr:
        om = np.asarray(pr["omega0"], dtype=float)
        Omega0 = np.diag(np.broadcast_to(om, (n,))) if om.ndim <= 1 else om
    else:
        Omega0 = float(pr.get("precision", 0.01)) * np.eye(n)
    lo = np.broadcast_to(np.asarray(pr.get("s_lower", 0.01), dtype=float), (K,)).copy()
    hi = np.broadcast_to(np.asarray(pr.get("s_upper", 3.0), dtype=float), (K,)).copy()
    return PriorSpec(b0, Omega0, lo, hi, float(pr.get("eta", 1.0)))


def _fix_for(spec: dict, p: int, K: int) -> RegressionFix | None:
    fx = spec.get("fixed")
    if not fx:
        return None
    out = RegressionFix()
    if "B" in fx:
        out.B = np.asarray(fx["B"], dtype=float).reshape(p, K)
        if "B_mask" in fx:
            out.B_mask = np.asarray(fx["B_mask"], dtype=bool).reshape(p, K)
    if "S" in fx:
        out.S = np.broadcast_to(np.asarray(fx["S"], dtype=float), (K,)).copy()
        if "S_mask" in fx:
            out.S_mask = np.asarray(fx["S_mask"], dtype=bool).reshape(K)
    if "R" in fx:
        out.R = np.asarray(fx["R"], dtype=float).reshape(K, K)
    return out


@dataclass
class BuiltProblem:
    data: CalibrationData
    priors: dict[int, PriorSpec]
    constraints: Constraints
    sampler: SamplerConfig
    person_ids: list[str]
    item_ids: list[str]
    feature_names: dict[int, list[str]]
    warnings: list[str]


def build_problem(cfg: CalibrationConfig) -> BuiltProblem:
    """Turn a config into sampler inputs, validating block membership and designs."""
    parsed = parse_responses(cfg.responses, cfg.allow_duplicates)
    ids = {"person": parsed.person_ids, "item": parsed.item_ids}
    index = {side: {u: n for n, u in enumerate(v)} for side, v in ids.items()}
    claimed: dict[str, dict[str, int]] = {"person": {}, "item": {}}
    members: dict[int, list[str]] = {}
    rest_blocks = {"person": [], "item": []}
    for b in cfg.blocks:
        side = b["side"]
        if b.get("members_file"):
            lst = _read_members(b)
        elif isinstance(b["members"], list):
            lst = [str(u) for u in b["members"]]
        elif b["members"] in ("rest", "all"):
            rest_blocks[side].append(b["id"])
            continue
        else:
            raise ValidationError(f"block {b['id']}: members must be a list, 'rest' or a members_file")
        unknown = [u for u in lst if u not in index[side]]
        if unknown:
            raise ValidationError(f"block {b['id']}: {len(unknown)} member(s) have no responses, e.g. {unknown[0]!r}")
        for u in lst:
            if u in claimed[side]:
                raise ValidationError(f"{side} {u!r} is in blocks {claimed[side][u]} and {b['id']}")
            claimed[side][u] = b["id"]
        members[b["id"]] = lst
    for side in ("person", "item"):
        rest = [u for u in ids[side] if u not in claimed[side]]
        if len(rest_blocks[side]) > 1:
            raise ValidationError(f"only one {side} block may take the remaining units")
        if rest_blocks[side]:
            members[rest_blocks[side][0]] = rest
        elif rest:
            raise ValidationError(f"{len(rest)} {side}(s) belong to no block, e.g. {rest[0]!r}")

    blocks, designs, priors, feature_names = [], {}, {}, {}
    constraints = Constraints()
    weights = parsed.weights
    warnings = []
    person_dims = {int(b.get("dim", 1)) for b in cfg.blocks if b["side"] == "person"}
    if len(person_dims) != 1:
        raise ValidationError("all person blocks must share the same dim")
    for b in cfg.blocks:
        side, bid = b["side"], int(b["id"])
        lst = members[b["id"]]
        if not lst:
            raise ValidationError(f"block {bid} has no members")
        X, names = parse_features(b.get("features"), lst, intercept=bool(b["intercept"]))
        fam = get_family(b["family"]) if side == "item" else None
        K = fam.param_count if fam else int(b.get("dim", 1))
        unit_idx = np.array([index[side][u] for u in lst], dtype=np.intp)
        blocks.append(BlockSpec(bid, side, K, X.shape[1], unit_idx, family=fam, person_dim=int(b.get("person_dim", 0))))
        W = weights[unit_idx] if side == "person" else None
        try:
            designs[bid] = BlockDesign(X, W)
        except ValidationError as exc:
            raise ValidationError(f"block {bid}: {exc}") from None
        priors[bid] = _prior_for(b, X.shape[1], K)
        fix = _fix_for(b, X.shape[1], K)
        if fix is not None:
            constraints.regression[bid] = fix
        feature_names[bid] = names
    for u in cfg.fixed_units:
        side = u.get("side")
        if side not in index or str(u.get("id")) not in index[side]:
            raise ValidationError(f"fixed unit {u.get('side')} {u.get('id')!r} does not exist")
        constraints.fixed_units[(side, index[side][str(u["id"])])] = np.asarray(u["values"], dtype=float)

    # identification: some person block with fixed location and scale, or anchors
    anchored = bool(cfg.fixed_units)
    for b in blocks:
        fix = constraints.regression.get(b.block_id)
        if b.side == "person" and fix is not None and fix.B is not None and fix.S is not None:
            anchored = True
    if not anchored:
        warnings.append(
            "no person block has fixed location and scale and no units are fixed; "
            "the latent scale may be unidentified"
        )
    data = CalibrationData(parsed.to_data(), blocks, designs)
    return BuiltProblem(data, priors, constraints, cfg.sampler, parsed.person_ids, parsed.item_ids, feature_names, warnings)


# ---------------------------------------------------------------------------
# minimal TOML writer (tomllib only reads)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dump_toml(doc: dict) -> str:
    """Serialize nested dicts, lists of dicts (arrays of tables) and scalars."""
    lines: list[str] = []

    def emit(table: dict, prefix: str):
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict) and not _is_table_array(v)}
        for k, v in scalars.items():
            lines.append(f"{k} = {_toml_value(v)}")
        for k, v in table.items():
            name = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                lines.append("")
                lines.append(f"[{name}]")
                emit(v, name)
            elif _is_table_array(v):
                for item in v:
                    lines.append("")
                    lines.append(f"[[{name}]]")
                    emit(item, name)

    emit(doc, "")
    return "\n".join(lines).lstrip("\n") + "\n"


def _is_table_array(v) -> bool:
    return isinstance(v, list) and len(v) > 0 and all(isinstance(x, dict) for x in v)


# ---------------------------------------------------------------------------
# outputs


def preflight_output_dir(path) -> Path:
    """Create ``path`` and make sure files can be written there."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {str(path)!r} is not writable: {exc}") from exc
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_draws(path, names, draws):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names)
        for row in draws:
            w.writerow([fmt(x) for x in row])


def read_draws(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        names = next(reader)
        rows = [[float(x) for x in row] for row in reader]
    return names, np.array(rows, dtype=float).reshape(len(rows), len(names))


def write_summary(path, summary: ChainSummary):
    write_table(
        path,
        ["parameter", "mean", "sd", "acceptance", "rhat"],
        [
            [n, fmt(m), fmt(s), fmt(a), fmt(r)]
            for n, m, s, a, r in zip(summary.names, summary.mean, summary.sd, summary.acceptance, summary.rhat)
        ],
    )


def write_fit(path, fit: FitReport, prefix: str = ""):
    lines = [
        f"{prefix}elpd = {fmt(fit.elpd)}",
        f"{prefix}p_waic = {fmt(fit.p_waic)}",
        f"{prefix}waic = {fmt(fit.waic)}",
    ]
    for stat, vals in fit.ppp.items():
        skipped = fit.skipped.get(stat)
        for k, v in enumerate(np.atleast_1d(vals)):
            lines.append(f"{prefix}ppp.{stat}.{k} = {fmt(v)}")
            if skipped is not None and np.atleast_1d(skipped)[k]:
                lines.append(f"{prefix}ppp_skipped.{stat}.{k} = {int(np.atleast_1d(skipped)[k])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_fit(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def write_moments(path, samples):
    write_table(
        path,
        ["parameter", "mean", "sd", "acceptance"],
        [[n, fmt(m), fmt(s), fmt(a)] for n, m, s, a in zip(samples.names, samples.mean, samples.sd, samples.acceptance)],
    )


def read_moments(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    names = [r["parameter"] for r in rows]
    cols = {k: np.array([float(r[k]) for r in rows]) for k in ("mean", "sd", "acceptance")}
    return names, cols


def software_versions() -> dict[str, str]:
    from . import __version__

    return {
        "spice_irt": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_outputs(
    samples: list,
    summary: ChainSummary,
    fit: FitReport,
    out_dir,
    config_echo: dict[str, Any] | None = None,
    person_ids: list[str] | None = None,
    item_ids: list[str] | None = None,
    timing: dict[str, float] | None = None,
) -> dict:
    """Write draws, moments, summary, fit report and manifest; return the manifest.

    Everything except ``timing.json`` is a deterministic function of the
    inputs and seed.
    """
    out = preflight_output_dir(out_dir)
    files = []
    for s in samples:
        name = f"draws_chain{s.chain}.csv"
        write_draws(out / name, s.names, s.draws)
        files.append(name)
        name = f"moments_chain{s.chain}.csv"
        write_moments(out / name, s)
        files.append(name)
    write_summary(out / "summary.csv", summary)
    files.append("summary.csv")
    write_fit(out / "fit.txt", fit)
    files.append("fit.txt")
    if person_ids is not None:
        write_table(out / "persons.csv", ["index", "id"], list(enumerate(person_ids)))
        files.append("persons.csv")
    if item_ids is not None:
        write_table(out / "items.csv", ["index", "id"], list(enumerate(item_ids)))
        files.append("items.csv")
    seed = (config_echo or {}).get("sampler", {}).get("seed")
    manifest = {
        "seed": seed,
        "chains": len(samples),
        "stored_draws_per_chain": [int(s.draws.shape[0]) for s in samples],
        "iterations_per_chain": [int(s.n_iterations) for s in samples],
        "config": config_echo or {},
        "versions": software_versions(),
        "files": {f: _sha256(out / f) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    if timing is not None:
        (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def write_truth(path, truth: dict[str, float]):
    write_table(path, ["parameter", "value"], [[k, fmt(v)] for k, v in truth.items()])


def read_truth(path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as f:
        return {r["parameter"]: float(r["value"]) for r in csv.DictReader(f)}


def eprint(*args):
    print(*args, file=sys.stderr, flush=True)
