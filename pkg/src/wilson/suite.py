"""Experiment harness: E1-E7 on the toy model, artifacts and a summary.

E1 orbits and invariance ratios, E2 gauge stability across seeds, E3
commutators against reorder drift, E4 RoPE phase drift and equivariance, E5
curvature maps, E6 curvature as a failure predictor, E7 cost attribution.
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from wilson import artifacts as art
from wilson import svg
from wilson.commutator import (
    calibration_batch,
    commutator_map,
    delta_drift_correlation,
    exceeding_pairs,
    layer_modules,
    reorder_drift,
    residuals_at,
)
from wilson.curvature import (
    CurvatureMap,
    SamplingKnobs,
    aggregate_kappa,
    curvature_map,
    permuted_score_sets,
    random_init_baseline,
    retained_scores,
)
from wilson.errors import MeasurementError
from wilson.gate import GateAction, Thresholds, ci_gate, signal_to_action
from wilson.gauge import gauge_stability_report
from wilson.numerics import SeededRng
from wilson.orbits import ANSWERS, KINDS, generate_orbit, invariance_ratio, ir_aggregates, task_label, task_sequence
from wilson.refmodel import ModelSpec, ModelWeights, forward, forward_logits, init_model, ones_preserving_rotation, rotate_residual_basis
from wilson.stats import BootstrapConfig, ScoredLabelSet, auc_score, bootstrap_ci, calibration, roc_auc_ap
from wilson.symmetry import DEFAULT_OFFSETS, mask_curve, max_perm_error, rope_drift, rope_relative_phase_error

log = logging.getLogger(__name__)

EXPERIMENTS = ("E1", "E2", "E3", "E4", "E5", "E6", "E7")


@dataclass
class SuiteConfig:
    out: Path = Path("wilson_out")
    seed: int = 0
    model_seed: int = 0
    spec: ModelSpec = field(default_factory=ModelSpec)
    knobs: SamplingKnobs = field(default_factory=SamplingKnobs)
    thresholds: Thresholds = field(default_factory=Thresholds)
    experiments: tuple[str, ...] = EXPERIMENTS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    workers: int = 1
    n_inputs: int = 32
    orbit_size: int = 6
    scan_quantile: float = 0.95
    rope_offsets: tuple[float, ...] = DEFAULT_OFFSETS
    drift_distance: str = "wasserstein1"
    n_null_perms: int = 100
    gauge_jitter: float = 0.01
    svg: bool = True

    def __post_init__(self):
        self.out = Path(self.out)
        self.experiments = tuple(self.experiments)
        unknown = set(self.experiments) - set(EXPERIMENTS)
        if unknown:
            raise ValueError(f"unknown experiments {sorted(unknown)}")


_SPEC_KEYS = {f.name for f in fields(ModelSpec)}
_KNOB_KEYS = {"r", "k", "m", "explore_fraction"}
_THRESH_KEYS = {"tau_kappa": "tau_kappa", "tau_delta": "tau_delta", "tol": "tol_delta_orbit", "tol_delta_orbit": "tol_delta_orbit"}
_BOOT_KEYS = {"resamples": "resamples", "confidence": "confidence", "stratified": "stratified", "bootstrap_seed": "seed"}


def _coerce(text, like):
    if isinstance(like, bool):
        return str(text).lower() in ("1", "true", "yes", "on")
    if isinstance(like, tuple):
        parts = [p.strip() for p in str(text).split(",") if p.strip()] if isinstance(text, str) else list(text)
        elem = type(like[0]) if like else str
        return tuple(elem(p) for p in parts)
    if isinstance(like, Path):
        return Path(text)
    return type(like)(text)


def apply_overrides(cfg: SuiteConfig, values: Mapping[str, object]) -> SuiteConfig:
    """Return ``cfg`` with flat ``key -> value`` overrides (strings are parsed)."""
    spec, knobs, th, boot, top = {}, {}, {}, {}, {}
    for key, val in values.items():
        key = key.strip().replace("-", "_")
        if key in _SPEC_KEYS:
            spec[key] = _coerce(val, getattr(cfg.spec, key))
        elif key in _KNOB_KEYS:
            knobs[key] = _coerce(val, getattr(cfg.knobs, key))
        elif key in _THRESH_KEYS:
            th[_THRESH_KEYS[key]] = float(val)
        elif key in _BOOT_KEYS:
            name = _BOOT_KEYS[key]
            boot[name] = _coerce(val, getattr(cfg.bootstrap, name))
        elif key in {f.name for f in fields(SuiteConfig)}:
            top[key] = _coerce(val, getattr(cfg, key))
        else:
            raise ValueError(f"unknown config key {key!r}")
    return replace(
        cfg,
        spec=replace(cfg.spec, **spec),
        knobs=replace(cfg.knobs, **knobs),
        thresholds=replace(cfg.thresholds, **th),
        bootstrap=replace(cfg.bootstrap, **boot),
        **top,
    )


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# overhead attribution


@dataclass(frozen=True)
class OverheadReport:
    scan_pct: float
    confirm_pct: float
    total_pct: float
    baseline_s: float

    @property
    def additivity_gap(self) -> float:
        """Relative gap between the timed total and scan + confirm."""
        parts = self.scan_pct + self.confirm_pct
        return abs(self.total_pct - parts) / max(self.total_pct, 1e-300)


def report_overhead(timings: Mapping[str, float]) -> OverheadReport:
    """Scan, confirm and total time as percentages of plain forward passes.

    ``timings`` needs ``baseline_s``, ``scan_s`` and ``confirm_s``; ``total_s``
    is used when present (an independently timed span), else the sum.
    """
    base = float(timings.get("baseline_s", 0.0))
    if not base > 0.0:
        raise MeasurementError("baseline forward time must be positive")
    scan, confirm = float(timings["scan_s"]), float(timings.get("confirm_s", 0.0))
    total = float(timings.get("total_s", scan + confirm))
    return OverheadReport(100 * scan / base, 100 * confirm / base, 100 * total / base, base)


def write_overhead(path: str | Path, rep: OverheadReport) -> int:
    """Three-bar layout: Scan, Confirm, Total."""
    rows = [("Scan", rep.scan_pct), ("Confirm", rep.confirm_pct), ("Total", rep.total_pct)]
    return art.CsvWriter(path, art.OVERHEAD).append({"category": c, "percent": v} for c, v in rows)


# ---------------------------------------------------------------------------
# the run


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, Path):
        return str(x)
    return x


@dataclass
class SuiteReport:
    out: Path
    results: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_json(self) -> str:
        return json.dumps(_jsonable({"results": self.results, "errors": self.errors, "elapsed_s": self.elapsed_s}), indent=2, sort_keys=True) + "\n"


class _Run:
    def __init__(self, cfg: SuiteConfig):
        self.cfg = cfg
        self.out = cfg.out
        self.w: ModelWeights = init_model(cfg.spec, cfg.model_seed)
        self.rng = SeededRng(cfg.seed)
        self.ctx = art.RowContext(f"toy-{self.w.model_hash[:12]}", cfg.seed)
        T = cfg.spec.max_T
        data_rng = self.rng.child(0)
        self.inputs = {f"x{n:03d}": task_sequence(data_rng.child(n), T) for n in range(cfg.n_inputs)}
        self.ir_records = None
        self.cmap: CurvatureMap | None = None

    def path(self, name: str) -> Path:
        return self.out / name

    def write_svg(self, name: str, text: str):
        if self.cfg.svg:
            self.path(name).write_text(text)

    # E1 -------------------------------------------------------------------
    def _orbit_records(self):
        if self.ir_records is None:
            orbit_rng = self.rng.child(1)
            recs = []
            for n, (input_id, tokens) in enumerate(sorted(self.inputs.items())):
                orbit = generate_orbit(tokens, KINDS[n % 2], self.cfg.orbit_size, orbit_rng.child(n))
                assert all(task_label(v) == task_label(tokens) for v in orbit.variants)
                recs.append(invariance_ratio(self.w, orbit, self.cfg.thresholds.tol_delta_orbit, input_id, candidates=ANSWERS))
            self.ir_records = recs
        return self.ir_records

    def e1(self):
        recs = self._orbit_records()
        art.write_ir(self.path("ir.csv"), recs, self.ctx)
        macro, micro = ir_aggregates(recs)
        ir = np.array([r.IR for r in recs])
        lo, hi, _ = bootstrap_ci(np.mean, ir, self.cfg.bootstrap, strata=[r.stratum for r in recs], rng=self.rng.child(11))
        fails = [signal_to_action(r, self.cfg.thresholds) for r in recs]
        by_kind = {k: float(np.mean([r.IR for r in recs if r.stratum == k])) for k in KINDS}
        return {
            "n_inputs": len(recs),
            "ir_macro": macro,
            "ir_micro": micro,
            "ir_macro_ci": [lo, hi],
            "ir_by_kind": by_kind,
            "failure_rate": float(np.mean([r.label for r in recs])),
            "fail_build": sum(d.action is GateAction.FAIL_BUILD for d in fails),
        }

    # E2 -------------------------------------------------------------------
    def _seed_model(self, s: int) -> ModelWeights:
        rng = self.rng.child(2).child(s)
        Q = ones_preserving_rotation(rng.child(0), self.cfg.spec.d_model)
        wq = rotate_residual_basis(self.w, Q)
        if self.cfg.gauge_jitter <= 0:
            return wq
        g = rng.child(1).generator
        layers = []
        for lw in wq.layers:
            ch = {}
            for name in ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2"):
                a = getattr(lw, name)
                ch[name] = a + self.cfg.gauge_jitter * a.std() * g.standard_normal(a.shape)
            layers.append(replace(lw, **ch))
        return wq.with_layers(layers)

    def e2(self):
        ids = sorted(self.inputs)
        labels = np.repeat([task_label(self.inputs[i]) for i in ids], self.cfg.spec.max_T)
        feats = {}
        for s in self.cfg.seeds:
            ws = self._seed_model(s)
            res = [forward(ws, self.inputs[i]).residuals for i in ids]  # each (L+1, T, d)
            stack = np.stack(res)
            feats[s] = {l: stack[:, l].reshape(-1, self.cfg.spec.d_model) for l in range(stack.shape[1])}
        rep = gauge_stability_report(feats, labels)
        art.write_gauge_stats(self.path("gauge_stats.csv"), rep.post, self.ctx)
        w = art.CsvWriter(self.path("gauge_prepost.csv"), art.GAUGE_PREPOST)
        w.append({"phase": ph, **asdict(r)} for ph, rows in (("pre", rep.pre), ("post", rep.post)) for r in rows)
        decision = signal_to_action(rep, self.cfg.thresholds)
        return {
            "variance_ratio": rep.variance_ratio,
            "cosine_pre_max": rep.max_cosine("pre"),
            "cosine_post_max": rep.max_cosine("post"),
            "kendall_pre_mean": float(np.mean([r.kendall_tau for r in rep.pre])),
            "kendall_post_mean": float(np.mean([r.kendall_tau for r in rep.post])),
            "decision": decision.action.value,
        }

    # E3 -------------------------------------------------------------------
    def e3(self):
        w, th = self.w, self.cfg.thresholds
        tokens = calibration_batch(w, self.rng.child(3), T=self.cfg.spec.max_T)
        all_recs = []
        pairs_writer = art.CsvWriter(self.path("commutator_pairs.csv"), art.COMMUTATOR_PAIRS)
        heat = None
        for layer in range(w.spec.n_layers):
            X = residuals_at(w, tokens, layer)
            for gran, block in (("heads", f"layer{layer}.attn"), ("sublayers", f"layer{layer}")):
                mods = layer_modules(w, layer, gran)
                cm = commutator_map(mods, X, block, self.cfg.workers)
                by_id = {m.id: m for m in mods}
                recs = [r.with_drift(float(np.mean(reorder_drift(w, tokens, by_id[r.module_a], by_id[r.module_b])))) for r in cm.records]
                art.write_commutator(self.path("commutator.csv"), recs, block, self.ctx)
                pairs_writer.append(
                    {"batch_id": r.batch_id, "module_a": r.module_a, "module_b": r.module_b, "delta_fro": r.delta_fro, "drift": r.drift} for r in recs
                )
                all_recs += recs
                if layer == 0 and gran == "heads":
                    heat = cm
        corr = delta_drift_correlation(all_recs)
        actions = [signal_to_action(r, th).action for r in all_recs]
        if heat is not None:
            self.write_svg("commutator_heatmap.svg", svg.heatmap(heat.matrix, heat.ids, "layer0 head commutators"))
        self.write_svg("delta_drift.svg", svg.scatter([r.delta_fro for r in all_recs], [r.drift for r in all_recs], "drift vs commutator", "delta", "drift"))
        return {
            "n_pairs": len(all_recs),
            "spearman": corr.spearman,
            "pearson": corr.pearson,
            "kendall_tau_b": corr.kendall_tau_b,
            "theil_sen": corr.theil_sen,
            "fuse_ok": actions.count(GateAction.FUSE_OK),
            "sequentialize": actions.count(GateAction.SEQUENTIALIZE),
            "counterexamples": len(exceeding_pairs(all_recs, th.tau_delta)),
        }

    # E4 -------------------------------------------------------------------
    def e4(self):
        w = self.w
        inputs = [self.inputs[i] for i in sorted(self.inputs)[:8]]
        curves = {d: rope_drift(w, inputs, self.cfg.rope_offsets, d) for d in ("wasserstein1", "sym_kl")}
        writer = art.CsvWriter(self.path("rope_drift.csv"), art.DRIFT_CURVE)
        for name, c in curves.items():
            writer.append(
                {"layer": l, "offset": float(off), "distance": float(c.distances[l, k]), "metric": name}
                for l in range(c.distances.shape[0])
                for k, off in enumerate(c.offsets)
            )
        main = curves[self.cfg.drift_distance]
        g = self.rng.child(4).generator
        probe_inputs = g.integers(0, w.spec.vocab, size=(5, w.spec.max_T))
        perms = [g.permutation(w.spec.max_T) for _ in range(20)]
        eps_free = max_perm_error(w, probe_inputs, perms, "none", "none")
        curve = mask_curve(w, rng=self.rng.child(5))
        art.CsvWriter(self.path("mask_curve.csv"), art.MASK_CURVE).append({"n": n, "epsilon_pi": e} for n, e in curve.items())
        mags = sorted({abs(float(o)) for o in main.offsets})
        self.write_svg("rope_drift.svg", svg.curve(main.offsets, {f"layer{l}": main.distances[l] for l in range(main.distances.shape[0])}, "phase drift"))
        return {
            "area_under_drift": main.area_under_drift,
            "area_sym_kl": curves["sym_kl"].area_under_drift,
            "layer_area": main.layer_area.tolist(),
            "cumulative_area": {m: main.area_upto(m) for m in mags},
            "zero_offset_distance": float(np.abs(main.distances[:, main.offsets == 0.0]).max()),
            "epsilon_pi_no_positions": eps_free.epsilon_pi,
            "mask_curve": curve,
            "rope_relative_phase_error": rope_relative_phase_error(w.spec, self.rng.child(6)),
        }

    # E5 -------------------------------------------------------------------
    def _curvature(self) -> CurvatureMap:
        if self.cmap is None:
            self.cmap = curvature_map(
                self.w, self.inputs, self.cfg.knobs, self.cfg.seed + 1, self.cfg.scan_quantile, workers=self.cfg.workers
            )
        return self.cmap

    def e5(self):
        cmap = self._curvature()
        retained = [s for k in sorted(cmap.scores) for s in retained_scores(cmap.scores[k])]
        art.write_holonomy(self.path("holonomy.csv"), retained, self.ctx)
        art.CsvWriter(self.path("holonomy_loops.csv"), art.HOLONOMY_LOOPS).append(art.holonomy_loop_rows(cmap.all_scores()))
        scans = [s for s in cmap.all_scores() if s.mode == "scan"]
        conf = [s for s in cmap.all_scores() if s.mode == "confirmed"]
        actions = [signal_to_action(s, self.cfg.thresholds).action for s in retained]
        return {
            "n_loops": len(scans),
            "n_confirmed": len(conf),
            "confirm_fraction": len(conf) / max(1, len(scans)),
            "kappa_scan_median": float(np.median([s.kappa for s in scans])),
            "kappa_confirmed_median": float(np.median([s.kappa for s in conf])) if conf else None,
            "add_verifiers": actions.count(GateAction.ADD_VERIFIERS),
            "parallel_ok": actions.count(GateAction.PARALLEL_OK),
        }

    # E6 -------------------------------------------------------------------
    def _predict(self, scores_by_input, labels: dict) -> dict:
        ids = sorted(labels)
        agg = {k: aggregate_kappa(scores_by_input[k]) for k in ids}
        y = np.array([labels[k] for k in ids])
        return {name: (np.array([agg[k][idx] for k in ids]), y) for idx, name in enumerate(("kappa_max", "kappa_p95"))}

    def e6(self):
        labels = {r.input_id: r.label for r in self._orbit_records()}
        cmap = self._curvature()
        sets = self._predict(cmap.scores, labels)
        writer = art.CsvWriter(self.path("prediction.csv"), art.PREDICTION)
        roc_writer = art.CsvWriter(self.path("roc.csv"), art.ROC_POINTS)
        out = {}
        null_rng = self.rng.child(7)
        null_auc = {k: [] for k in sets}
        for b in range(self.cfg.n_null_perms):
            perm = self._predict(permuted_score_sets(cmap.scores, null_rng.child(b)), labels)
            for k, (s, y) in perm.items():
                null_auc[k].append(auc_score(s, y))
        rand = self._predict(
            random_init_baseline(self.w, self.inputs, self.cfg.model_seed + 1000, self.cfg.knobs, self.cfg.seed + 1, scan_quantile=self.cfg.scan_quantile).scores,
            labels,
        )
        for name, (s, y) in sets.items():
            data = ScoredLabelSet(s, y)
            roc = roc_auc_ap(data)
            cal = calibration(data)
            lo, hi, _ = bootstrap_ci(auc_score, (s, y), self.cfg.bootstrap, strata=y, rng=self.rng.child(8))
            rand_auc = auc_score(*rand[name])
            writer.append([
                {"score": name, "auc": roc.auc, "ap": roc.ap, "brier": cal.brier, "ece": cal.ece, "auc_lo": lo, "auc_hi": hi, "null": "none"},
                {"score": name, "auc": float(np.mean(null_auc[name])), "null": "permuted_map"},
                {"score": name, "auc": rand_auc, "null": "random_init"},
            ])
            roc_writer.append({"score": name, "fpr": a, "tpr": b} for a, b in zip(roc.fpr, roc.tpr))
            out[name] = {
                "auc": roc.auc, "ap": roc.ap, "brier": cal.brier, "ece": cal.ece, "auc_ci": [lo, hi],
                "null_permuted_auc_mean": float(np.mean(null_auc[name])), "null_random_init_auc": rand_auc,
                "normalized_for_calibration": cal.normalized,
            }
            if name == "kappa_max":
                self.write_svg("roc.svg", svg.curve(roc.fpr, {"kappa_max": roc.tpr}, "ROC", diagonal=True))
        out["positives"] = int(sum(labels.values()))
        out["n"] = len(labels)
        return out

    # E7 -------------------------------------------------------------------
    def e7(self):
        cmap = self._curvature()
        ids = sorted(self.inputs)
        reps = 5
        t0 = time.perf_counter()
        for _ in range(reps):
            for i in ids:
                forward_logits(self.w, self.inputs[i])
        baseline = (time.perf_counter() - t0) / reps
        rep = report_overhead({**cmap.timings, "baseline_s": baseline})
        write_overhead(self.path("overhead.csv"), rep)
        self.write_svg("overhead.svg", svg.bars({"Scan": rep.scan_pct, "Confirm": rep.confirm_pct, "Total": rep.total_pct}, "overhead (% of forward)"))
        return {
            "baseline_forward_s": baseline,
            "scan_s": cmap.timings["scan_s"],
            "confirm_s": cmap.timings["confirm_s"],
            "total_s": cmap.timings["total_s"],
            "scan_pct": rep.scan_pct,
            "confirm_pct": rep.confirm_pct,
            "total_pct": rep.total_pct,
            "additivity_gap": rep.additivity_gap,
        }


def run_suite(cfg: SuiteConfig) -> SuiteReport:
    """Write the manifest, then run the requested experiments in order.

    A failing experiment is logged and recorded in ``report.errors``; the
    others still run.
    """
    t_start = time.perf_counter()
    cfg.out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg)
    manifest = art.RunManifest(
        model_hash=run.w.model_hash,
        seeds=[cfg.seed, cfg.model_seed, *cfg.seeds],
        knobs=asdict(cfg.knobs),
        thresholds=cfg.thresholds.to_dict(),
        model_spec=cfg.spec.to_dict(),
        extra={"experiments": list(cfg.experiments), "scan_quantile": cfg.scan_quantile, "n_inputs": cfg.n_inputs},
    )
    art.write_manifest(cfg.out / "manifest.json", manifest)
    report = SuiteReport(cfg.out)
    steps: dict[str, Callable[[], dict]] = {
        "E1": run.e1, "E2": run.e2, "E3": run.e3, "E4": run.e4, "E5": run.e5, "E6": run.e6, "E7": run.e7,
    }
    for name in EXPERIMENTS:
        if name not in cfg.experiments:
            continue
        t0 = time.perf_counter()
        try:
            res = steps[name]()
            res["elapsed_s"] = time.perf_counter() - t0
            report.results[name] = res
            log.info("%s done in %.2fs", name, res["elapsed_s"])
        except Exception as exc:  # one experiment failing must not stop the rest
            log.error("%s failed: %s\n%s", name, exc, traceback.format_exc())
            report.errors[name] = f"{type(exc).__name__}: {exc}"
    report.elapsed_s = time.perf_counter() - t_start
    snapshot = metrics_snapshot(report)
    (cfg.out / "metrics.json").write_text(json.dumps(_jsonable(snapshot), indent=2, sort_keys=True) + "\n")
    (cfg.out / "gate_report.txt").write_text(ci_gate(snapshot, None, cfg.thresholds).to_text())
    (cfg.out / "summary.json").write_text(report.to_json())
    return report


def metrics_snapshot(report: SuiteReport) -> dict:
    """Metrics the CI gate compares between runs."""
    snap: dict = {"schema": art.SCHEMA_VERSION}
    r = report.results
    if "E2" in r:
        snap["variance_ratio"] = r["E2"]["variance_ratio"]
    if "E6" in r:
        snap["auc"] = r["E6"]["kappa_max"]["auc"]
    if "E7" in r:
        snap["overhead_total"] = r["E7"]["total_pct"]
    return snap
