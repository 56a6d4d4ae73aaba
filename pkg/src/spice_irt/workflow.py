"""End-to-end pipelines behind the command line: calibrate, simulate, diagnose."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from . import io
from .diagnostics import (
    ChainSummary,
    FitReport,
    PPCDraw,
    builtin_statistics,
    pointwise_loglik,
    posterior_predictive_check,
    summarize,
    waic,
)
from .errors import ValidationError
from .rng import STAGE_PPC, StreamFactory
from .sampler import CalibrationData, Constraints, run
from .simgen import SimBlock, SimSpec, generate

FIT_MAX_DRAWS = 200


class DrawUnpacker:
    """Turns a flat draw row back into person latents and natural item parameters.

    Fixed units, which have no column, take their constrained values.
    """

    def __init__(self, data: CalibrationData, constraints: Constraints, names: list[str]):
        self.data = data
        col = {n: c for c, n in enumerate(names)}
        n_persons = data.responses.n_persons
        K = data.person_dim
        self.theta0 = np.zeros((n_persons, K))
        self.theta_cols = np.full((n_persons, K), -1, dtype=np.intp)
        for i in range(n_persons):
            for k in range(K):
                self.theta_cols[i, k] = col.get(f"person{i}.dim{k}", -1)
        self.psi0, self.psi_cols = {}, {}
        for b in data.blocks:
            if b.side != "item":
                continue
            names_b = b.family.param_names
            base = np.zeros((b.size, len(names_b)))
            cols = np.full((b.size, len(names_b)), -1, dtype=np.intp)
            for u, j in enumerate(b.unit_ids):
                for m, nm in enumerate(names_b):
                    cols[u, m] = col.get(f"item{j}.{nm}", -1)
            self.psi0[b.block_id], self.psi_cols[b.block_id] = base, cols
        for (side, idx), vals in constraints.fixed_units.items():
            if side == "person":
                self.theta0[idx] = vals
            else:
                b = data.block(data.linkage.item_block[idx])
                self.psi0[b.block_id][data.linkage.item_local[idx]] = vals

    @staticmethod
    def _fill(base, cols, row):
        out = base.copy()
        free = cols >= 0
        out[free] = row[cols[free]]
        return out

    def __call__(self, row: NDArray) -> PPCDraw:
        theta = self._fill(self.theta0, self.theta_cols, row)
        psi = {b: self._fill(self.psi0[b], self.psi_cols[b], row) for b in self.psi0}
        return PPCDraw(theta, psi)


def fit_draw_indices(n_total: int, max_draws: int = FIT_MAX_DRAWS) -> NDArray[np.intp]:
    if n_total <= max_draws:
        return np.arange(n_total)
    return np.unique(np.linspace(0, n_total - 1, max_draws).round().astype(np.intp))


def compute_fit(
    data: CalibrationData,
    constraints: Constraints,
    names: list[str],
    draws_per_chain: list[NDArray],
    seed: int,
    max_draws: int = FIT_MAX_DRAWS,
) -> FitReport:
    """WAIC and posterior predictive p-values from stored draws pooled over chains.

    At most ``max_draws`` evenly spaced draws are used.
    """
    pooled = np.concatenate(draws_per_chain, axis=0)
    unpack = DrawUnpacker(data, constraints, names)
    ppc_draws = [unpack(pooled[t]) for t in fit_draw_indices(pooled.shape[0], max_draws)]
    ll = np.stack([pointwise_loglik(d, data) for d in ppc_draws])
    elpd, p_waic, w = waic(ll)
    rng = StreamFactory(seed, 0).stream(0, 0, STAGE_PPC)
    ppp, skipped = {}, {}
    for name, stat in builtin_statistics(data, rng).items():
        ppp[name], skipped[name] = posterior_predictive_check(ppc_draws, data, stat, rng)
    return FitReport(elpd, p_waic, w, ppp, skipped)


@dataclass
class CalibrationResult:
    samples: list
    summary: ChainSummary
    fit: FitReport
    manifest: dict
    problem: io.BuiltProblem


def calibrate(
    cfg: io.CalibrationConfig,
    progress: Callable[[dict], None] | None = None,
    progress_every: int = 100,
) -> CalibrationResult:
    out = io.preflight_output_dir(cfg.output_dir)
    t0 = time.perf_counter()
    problem = io.build_problem(cfg)
    for w in problem.warnings:
        if progress:
            progress({"warning": w})
    t1 = time.perf_counter()
    samples = run(cfg.sampler, problem.data, problem.priors, problem.constraints, progress, progress_every)
    t2 = time.perf_counter()
    summary = summarize(samples)
    fit = compute_fit(problem.data, problem.constraints, samples[0].names, [s.draws for s in samples], cfg.sampler.seed)
    t3 = time.perf_counter()
    echo = cfg.echo()
    echo["streaming_waic"] = {
        f"chain{s.chain}": dict(zip(("elpd", "p_waic", "waic"), s.waic)) for s in samples
    }
    echo["phase_acceptance"] = {f"chain{s.chain}": s.phase_acceptance for s in samples}
    timing = {"setup_seconds": t1 - t0, "sampling_seconds": t2 - t1, "diagnostics_seconds": t3 - t2}
    manifest = io.write_outputs(samples, summary, fit, out, echo, problem.person_ids, problem.item_ids, timing)
    return CalibrationResult(samples, summary, fit, manifest, problem)


@dataclass
class StoredChain:
    """A chain read back from disk; enough for :func:`summarize`."""

    chain: int
    names: list[str]
    draws: NDArray
    mean: NDArray
    sd: NDArray
    acceptance: NDArray


def load_run(run_dir) -> tuple[dict, list[StoredChain]]:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError(f"{str(run_dir)!r} has no manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    chains = []
    for c in range(manifest["chains"]):
        names, draws = io.read_draws(run_dir / f"draws_chain{c}.csv")
        m_names, cols = io.read_moments(run_dir / f"moments_chain{c}.csv")
        if m_names != names:
            raise ValidationError(f"chain {c}: draws and moments files disagree on parameters")
        chains.append(StoredChain(c, names, draws, cols["mean"], cols["sd"], cols["acceptance"]))
    return manifest, chains


def diagnose(run_dir, out_dir=None) -> tuple[ChainSummary, FitReport]:
    """Recompute the summary table and fit report of a finished run."""
    run_dir = Path(run_dir)
    manifest, chains = load_run(run_dir)
    out = io.preflight_output_dir(out_dir if out_dir is not None else run_dir / "diagnose")
    raw = dict(manifest["config"])
    cfg = io.config_from_dict(raw, base=run_dir)
    problem = io.build_problem(cfg)
    summary = summarize(chains)
    fit = compute_fit(problem.data, problem.constraints, chains[0].names, [c.draws for c in chains], cfg.sampler.seed)
    io.write_summary(out / "summary.csv", summary)
    io.write_fit(out / "fit.txt", fit)
    return summary, fit


# ---------------------------------------------------------------------------
# simulation


def load_sim_spec(path) -> tuple[SimSpec, dict]:
    """Read a simulation config.  Returns the spec and the raw document."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"simulation config {str(path)!r} not found")
    with open(path, "rb") as f:
        raw = io.tomllib.load(f)
    sim = raw.get("simulation", {})
    blocks = []
    for b in raw.get("blocks", []):
        try:
            blocks.append(
                SimBlock(
                    side=b["side"],
                    size=int(b["size"]),
                    B=b["B"],
                    S=b["S"],
                    R=b.get("R"),
                    family=b.get("family"),
                    n_features=int(b.get("n_features", 0)),
                    intercept=bool(b.get("intercept", True)),
                    person_dim=int(b.get("person_dim", 0)),
                )
            )
        except KeyError as exc:
            raise ValidationError(f"simulation block is missing {exc.args[0]!r}") from None
    spec = SimSpec(
        blocks=blocks,
        responses_per_person=int(sim.get("responses_per_person", 0)),
        zipf_exponent=sim.get("zipf_exponent"),
        weight_sd=float(sim.get("weight_sd", 0.0)),
        seed=int(sim.get("seed", 0)),
    )
    return spec, raw


def simulate(spec: SimSpec, out_dir, identify: bool = True, sampler: dict | None = None) -> Path:
    """Generate a data set and write it with a ready-to-run calibration config.

    Writes ``responses.csv``, ``units.csv`` (block membership), one features
    file per block with features, ``truth.csv`` and ``config.toml``.  Truth
    names use the indexing that calibration of these files produces.  With
    ``identify`` the person blocks' regression parameters are fixed at their
    true values.
    """
    out = io.preflight_output_dir(out_dir)
    res = generate(spec)
    data = res.data
    resp = data.responses
    # calibration indexes items by first appearance in the response file
    _, first = np.unique(resp.item, return_index=True)
    order = np.argsort(first, kind="stable")
    item_new = np.empty(resp.n_items, dtype=np.intp)
    item_new[order] = np.arange(resp.n_items)
    item_ids = [f"i{j}" for j in range(resp.n_items)]
    io.write_responses(out / "responses.csv", resp, res.person_ids, item_ids, with_weight=spec.weight_sd > 0)

    truth = {}
    for name, v in res.truth.items():
        if name.startswith("item"):
            j, rest = name[4:].split(".", 1)
            name = f"item{item_new[int(j)]}.{rest}"
        truth[name] = v
    io.write_truth(out / "truth.csv", truth)

    rows = []
    doc_blocks = []
    for b, sb in zip(data.blocks, _sorted(spec)):
        ids = res.person_ids if b.side == "person" else item_ids
        members = [ids[u] for u in b.unit_ids]
        rows += [[m, b.block_id] for m in members]
        entry = {"id": b.block_id, "side": b.side, "members_file": "units.csv", "members_column": "block",
                 "members_value": b.block_id, "intercept": sb.intercept}
        if sb.n_features:
            fname = f"features_block{b.block_id}.csv"
            io.write_features(out / fname, members, res.features[b.block_id])
            entry["features"] = fname
        if b.side == "person":
            entry["dim"] = b.dim
            if identify:
                entry["fixed"] = {"B": sb.B.tolist(), "S": sb.S.tolist()}
        else:
            entry["family"] = b.family.tag
            entry["person_dim"] = b.person_dim
        doc_blocks.append(entry)
    io.write_table(out / "units.csv", ["id", "block"], rows)
    doc = {
        "data": {"responses": "responses.csv"},
        "blocks": doc_blocks,
        "sampler": dict(sampler or {}),
        "output": {"dir": "run"},
    }
    (out / "config.toml").write_text(io.dump_toml(doc), encoding="utf-8")
    return out


def _sorted(spec: SimSpec):
    return [b for b in spec.blocks if b.side == "person"] + [b for b in spec.blocks if b.side == "item"]
