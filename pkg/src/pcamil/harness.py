"""Cross-validation protocol, method arms, sweeps and report files."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from pcamil import metrics
from pcamil.data import DatasetManifest, Label, Side, load_bags, load_manifest
from pcamil.embed import EigenBasis, patient_embedding
from pcamil.errors import InvalidConfig, PcamilError, SingleClassCohort, TooFewPerClass
from pcamil.mil import MilConfig, history_csv, predict, save_checkpoint, train_fold
from pcamil.priors import PriorConfig, apply_prior_many, side_only_classifier, train_patch_scorer

log = logging.getLogger(__name__)

METHODS = ("Baseline", "CI-Baseline", "CI-CRC", "MIL-CRC", "CIMIL-CRC")
SCORED_METHODS = ("Baseline", "CI-Baseline", "MIL-CRC", "CIMIL-CRC")
METRIC_NAMES = ("auroc", "auprc", "f1", "kappa", "accuracy")
# (reference, candidate) pairs compared by the paired tests
COMPARISONS = (
    ("Baseline", "MIL-CRC"),
    ("CI-Baseline", "CIMIL-CRC"),
    ("MIL-CRC", "CIMIL-CRC"),
)
SWEEP_AXES = ("k_eigenvectors", "alpha", "beta")
FAILURE_MARKER = "FAILED"


@dataclass(frozen=True)
class ExperimentConfig:
    train_manifest: str | None = None
    test_manifest: str | None = None
    n_folds: int = 5
    k_eigenvectors: int = 90
    alpha: float = 0.01
    prior: PriorConfig = field(default_factory=PriorConfig)
    mil: MilConfig = field(default_factory=MilConfig)
    methods: tuple[str, ...] = METHODS
    output_dir: str = "results"
    seed: int = 0
    threshold: float = 0.5
    eigen_scaling: str = "none"
    patch_epochs: int = 200
    patch_lr: float = 0.01
    figures: bool = True

    def __post_init__(self):
        if self.n_folds < 2:
            raise InvalidConfig("n_folds must be >= 2")
        if self.k_eigenvectors < 1:
            raise InvalidConfig("k_eigenvectors must be >= 1")
        if not 0 <= self.alpha < 0.5:
            raise InvalidConfig("alpha must lie in [0, 0.5)")
        if not 0 <= self.threshold <= 1:
            raise InvalidConfig("threshold must lie in [0, 1]")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise InvalidConfig(f"methods must be a nonempty subset of {METHODS}, got {self.methods}")
        if self.eigen_scaling not in ("none", "sqrt"):
            raise InvalidConfig("eigen_scaling must be 'none' or 'sqrt'")
        # keep a canonical method order so reports do not depend on input order
        object.__setattr__(self, "methods", tuple(m for m in METHODS if m in self.methods))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config fields: {sorted(unknown)}")
        try:
            if isinstance(d.get("prior"), dict):
                d["prior"] = PriorConfig(**d["prior"])
            if isinstance(d.get("mil"), dict):
                d["mil"] = MilConfig(**d["mil"])
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    def mil_config(self, d_in: int, seed: int) -> MilConfig:
        return replace(self.mil, d_in=d_in, label_smoothing=self.alpha, seed=seed)


# ---------------------------------------------------------------- folds


def stratified_kfold(labels: Sequence[Label], n_folds: int, seed: int) -> list[np.ndarray]:
    """Validation index sets for ``n_folds`` stratified folds.

    Each class is shuffled with a seeded RNG and dealt round-robin; the fold
    pointer carries over from one class to the next so fold sizes also
    differ by at most one.
    """
    labels = list(labels)
    if n_folds < 2:
        raise InvalidConfig("n_folds must be >= 2")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    pos = 0
    for cls in Label:
        idx = np.array([i for i, lab in enumerate(labels) if lab is cls], dtype=int)
        if len(idx) < n_folds:
            raise TooFewPerClass(f"{len(idx)} {cls.value} patients for {n_folds} folds")
        for i in idx[rng.permutation(len(idx))]:
            folds[pos % n_folds].append(int(i))
            pos += 1
    return [np.array(sorted(f), dtype=int) for f in folds]


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(100 + fold,)).generate_state(1)[0])


# ---------------------------------------------------------------- cohort data


@dataclass
class Cohort:
    """A manifest with its bags and embeddings loaded in memory."""

    manifest: DatasetManifest
    patches: dict[str, np.ndarray]
    bases: dict[str, EigenBasis]

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.manifest.records]

    @property
    def y(self) -> np.ndarray:
        return np.array([r.label.y for r in self.manifest.records])

    @property
    def sides(self) -> list[Side]:
        return [r.side for r in self.manifest.records]

    @property
    def feature_dim(self) -> int:
        return next(iter(self.patches.values())).shape[1]

    def instances(self, k: int, scaling: str = "none") -> list[np.ndarray]:
        return [self.bases[pid].truncate(k).instances(scaling) for pid in self.ids]


def load_cohort(manifest: DatasetManifest | str | Path, k: int) -> Cohort:
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    bags = load_bags(manifest)
    bases = {pid: patient_embedding(bag, k) for pid, bag in bags.items()}
    patches = {pid: np.asarray(bag.features, dtype=np.float64) for pid, bag in bags.items()}
    return Cohort(manifest, patches, bases)


# ---------------------------------------------------------------- method arms


@dataclass
class FoldModels:
    fold: int
    mil: object
    patch_scorer: object | None
    history: list


def train_fold_models(cfg: ExperimentConfig, train: Cohort, train_idx: np.ndarray, fold: int,
                      need_baseline: bool = True, need_mil: bool = True) -> FoldModels:
    seed = fold_seed(cfg.seed, fold)
    ids = [train.ids[i] for i in train_idx]
    labels = [train.manifest.records[i].label for i in train_idx]
    if len(set(labels)) < 2:
        raise TooFewPerClass(f"fold {fold}: training portion holds a single class")
    scorer = None
    if need_baseline:
        x = np.concatenate([train.patches[pid] for pid in ids])
        patch_labels = [lab for pid, lab in zip(ids, labels) for _ in range(len(train.patches[pid]))]
        scorer = train_patch_scorer(x, patch_labels, cfg.patch_epochs, cfg.patch_lr, seed)
    result = None
    history = []
    if need_mil:
        bags = [train.bases[pid].truncate(cfg.k_eigenvectors).instances(cfg.eigen_scaling) for pid in ids]
        mcfg = cfg.mil_config(train.feature_dim, seed)
        result = train_fold(list(zip(bags, labels)), mcfg)
        history = result.history
    return FoldModels(fold, result, scorer, history)


def score_cohort(cfg: ExperimentConfig, models: FoldModels, cohort: Cohort, idx=None) -> dict[str, np.ndarray]:
    """Final per-patient scores of every scored method on ``cohort``."""
    idx = np.arange(len(cohort.ids)) if idx is None else np.asarray(idx)
    ids = [cohort.ids[i] for i in idx]
    sides = [cohort.sides[i] for i in idx]
    out = {}
    if models.patch_scorer is not None:
        base = np.array([models.patch_scorer.score_bag(cohort.patches[pid]) for pid in ids])
        out["Baseline"] = base
        out["CI-Baseline"] = apply_prior_many(base, sides, cfg.prior)
    if models.mil is not None:
        bags = [cohort.bases[pid].truncate(cfg.k_eigenvectors).instances(cfg.eigen_scaling) for pid in ids]
        p = predict(models.mil.params, bags)
        out["MIL-CRC"] = p
        out["CIMIL-CRC"] = apply_prior_many(p, sides, cfg.prior)
    return out


def method_metrics(y: np.ndarray, scores: np.ndarray, threshold: float) -> dict[str, float]:
    rep = metrics.binary_report(y, scores, threshold)
    return {
        "auroc": metrics.roc_auc(y, scores),
        "auprc": metrics.average_precision(y, scores),
        "f1": rep.f1,
        "kappa": rep.kappa,
        "accuracy": rep.accuracy,
    }


def side_only_scores(sides: Sequence[Side]) -> np.ndarray:
    return np.array([float(side_only_classifier(s).y) for s in sides])


# ---------------------------------------------------------------- experiment


@dataclass
class FoldOutcome:
    fold: int
    scores: dict[str, np.ndarray]
    history: list
    checkpoint_epoch: int | None


def _fold_job(args) -> FoldOutcome:
    cfg, train, test, fold, train_idx = args
    need_base = any(m in cfg.methods for m in ("Baseline", "CI-Baseline"))
    need_mil = any(m in cfg.methods for m in ("MIL-CRC", "CIMIL-CRC"))
    models = train_fold_models(cfg, train, train_idx, fold, need_base, need_mil)
    scores = score_cohort(cfg, models, test)
    scores = {m: s for m, s in scores.items() if m in cfg.methods}
    ckpt = models.mil.checkpoint_epoch if models.mil is not None else None
    return FoldOutcome(fold, scores, models.history, ckpt)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PCAMIL_THREADS", "1")))
    except ValueError:
        raise InvalidConfig("PCAMIL_THREADS must be an integer") from None


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v))


@dataclass
class ExperimentReport:
    output_dir: Path
    fold_rows: list[dict]
    summary: dict
    files: list[Path]


def run_experiment(cfg: ExperimentConfig, figures: bool | None = None) -> ExperimentReport:
    """Train every fold's models on the training manifest and score the test manifest.

    Writes ``folds.csv``, ``predictions.csv``, ``history_fold<k>.csv``,
    ``summary.json`` (and figures) into ``cfg.output_dir``. A failing fold
    stops the run after the completed folds are flushed next to a
    ``FAILED`` marker.
    """
    if cfg.train_manifest is None or cfg.test_manifest is None:
        raise InvalidConfig("run_experiment needs both train_manifest and test_manifest")
    figures = cfg.figures if figures is None else figures
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / FAILURE_MARKER
    if marker.exists():
        marker.unlink()

    train = load_cohort(load_manifest(cfg.train_manifest, "train"), cfg.k_eigenvectors)
    folds = stratified_kfold(train.manifest.labels, cfg.n_folds, cfg.seed)
    all_idx = np.arange(len(train.ids))
    # the test manifest is first touched here, after training inputs are fixed
    test = load_cohort(load_manifest(cfg.test_manifest, "test"), cfg.k_eigenvectors)
    if len(set(test.y.tolist())) < 2:
        raise SingleClassCohort("test manifest must contain both classes")
    if test.feature_dim != train.feature_dim:
        raise InvalidConfig(f"test feature_dim {test.feature_dim} != train {train.feature_dim}")

    jobs = [(cfg, train, test, f, np.setdiff1d(all_idx, val)) for f, val in enumerate(folds)]
    outcomes: list[FoldOutcome] = []
    error = None
    workers = min(_threads(), len(jobs))
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for res in pool.map(_fold_job, jobs):
                    outcomes.append(res)
        else:
            for job in jobs:
                outcomes.append(_fold_job(job))
    except PcamilError as exc:
        error = exc

    files = _write_experiment(cfg, out, test, outcomes, figures)
    if error is not None:
        marker.write_text(f"fold {len(outcomes)} failed: {type(error).__name__}: {error}\n", encoding="utf-8")
        raise error
    rows = read_fold_rows(out / "folds.csv")
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    return ExperimentReport(out, rows, summary, files)


def _write_experiment(cfg, out: Path, test: Cohort, outcomes: list[FoldOutcome], figures: bool) -> list[Path]:
    y = test.y
    files = []

    pred_buf = io.StringIO()
    pw = csv.writer(pred_buf, lineterminator="\n")
    pw.writerow(["method", "fold", "patient_id", "label", "side", "score", "pred"])
    fold_buf = io.StringIO()
    fw = csv.writer(fold_buf, lineterminator="\n")
    fw.writerow(["method", "fold", *METRIC_NAMES])

    for method in cfg.methods:
        if method == "CI-CRC":
            s = side_only_scores(test.sides)
            rep = metrics.binary_report(y, s, cfg.threshold)
            fw.writerow([method, "all", "", "", _fmt(rep.f1), _fmt(rep.kappa), _fmt(rep.accuracy)])
            for pid, rec, sc in zip(test.ids, test.manifest.records, s):
                pw.writerow([method, "all", pid, rec.label.value, rec.side.value, _fmt(sc), int(sc >= cfg.threshold)])
            continue
        for oc in outcomes:
            s = oc.scores[method]
            m = method_metrics(y, s, cfg.threshold)
            fw.writerow([method, oc.fold, *(_fmt(m[k]) for k in METRIC_NAMES)])
            for pid, rec, sc in zip(test.ids, test.manifest.records, s):
                pw.writerow([method, oc.fold, pid, rec.label.value, rec.side.value, _fmt(sc), int(sc >= cfg.threshold)])

    for name, text in (("folds.csv", fold_buf.getvalue()), ("predictions.csv", pred_buf.getvalue())):
        (out / name).write_text(text, encoding="utf-8")
        files.append(out / name)
    for oc in outcomes:
        if oc.history:
            p = out / f"history_fold{oc.fold}.csv"
            p.write_text(history_csv(oc.history), encoding="utf-8")
            files.append(p)

    checkpoints = {str(oc.fold): oc.checkpoint_epoch for oc in outcomes if oc.history}
    # the report location is implied by where summary.json sits; leaving it out
    # keeps reports of identical runs byte-identical across directories
    recorded = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    summary = summarize(read_fold_rows(out / "folds.csv"), read_predictions(out / "predictions.csv"),
                        recorded, checkpoints)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(out / "summary.json")
    if figures and outcomes:
        files += render_figures(out, read_predictions(out / "predictions.csv"), summary["methods"])
    return files


# ---------------------------------------------------------------- summaries


def read_fold_rows(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in METRIC_NAMES:
            r[k] = float(r[k]) if r.get(k) not in (None, "") else None
    return rows


def read_predictions(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["score"] = float(r["score"])
        r["pred"] = int(r["pred"])
        r["y"] = Label.parse(r["label"]).y
    return rows


REPORT_NOTES = {
    "auprc": "average precision with tied scores processed as one block",
    "ci": "95% CI = mean +- t(0.975, n-1) * sd / sqrt(n) over folds, clipped to [0, 1] ([-1, 1] for kappa)",
    "threshold": "thresholded metrics predict MSI when the final (post-prior) score >= threshold",
    "undefined_side": "undefined tumour side takes the right-side branch (prior beta, side-only MSI)",
    "checkpoint": "MIL weights from the last epoch with train accuracy and MSI accuracy > 0.95; "
                  "final-epoch weights when no epoch qualified (see checkpoint_epochs)",
}


def summarize(fold_rows: list[dict], predictions: list[dict], config: dict | None = None,
              checkpoints: dict | None = None) -> dict:
    """Aggregate fold metrics and run the paired tests."""
    by_method: dict[str, list[dict]] = {}
    for r in fold_rows:
        by_method.setdefault(r["method"], []).append(r)

    methods = {}
    for method, rows in by_method.items():
        cell = {}
        for k in METRIC_NAMES:
            vals = [r[k] for r in rows if r[k] is not None]
            if not vals:
                continue
            if len(vals) >= 2:
                s = metrics.aggregate_folds(vals, (-1.0, 1.0) if k == "kappa" else (0.0, 1.0))
                cell[k] = {"mean": s.mean, "sd": s.sd, "ci_low": s.ci_low, "ci_high": s.ci_high,
                           "folds": vals}
            else:
                cell[k] = {"value": vals[0]}
        methods[method] = cell

    tests = []
    for ref, cand in COMPARISONS:
        if ref not in by_method or cand not in by_method:
            continue
        ref_rows = {r["fold"]: r for r in by_method[ref]}
        cand_rows = {r["fold"]: r for r in by_method[cand]}
        shared = sorted(set(ref_rows) & set(cand_rows), key=lambda f: int(f))
        entry = {"reference": ref, "candidate": cand}
        for k in ("auroc", "auprc"):
            if len(shared) >= 2:
                t, p = metrics.paired_t_test([cand_rows[f][k] for f in shared], [ref_rows[f][k] for f in shared])
                entry[f"t_test_{k}"] = {"t": _json_float(t), "p": p}
        entry["mcnemar"] = _mcnemar_per_fold(predictions, ref, cand, shared)
        tests.append(entry)

    summary = {"methods": methods, "tests": tests, "notes": REPORT_NOTES}
    if config is not None:
        summary["config"] = config
    if checkpoints is not None:
        summary["checkpoint_epochs"] = checkpoints
        summary["checkpoint_fallback_folds"] = sorted(f for f, e in checkpoints.items() if e is None)
    return summary


def _json_float(v: float):
    return v if np.isfinite(v) else ("inf" if v > 0 else "-inf")


def _mcnemar_per_fold(predictions, ref, cand, folds) -> list[dict]:
    index = {}
    for r in predictions:
        index[(r["method"], r["fold"], r["patient_id"])] = r["pred"] == r["y"]
    out = []
    for f in folds:
        keys = sorted(pid for (m, fo, pid) in index if m == ref and fo == f)
        a = [index[(cand, f, pid)] for pid in keys]
        b = [index[(ref, f, pid)] for pid in keys]
        stat, p = metrics.mcnemar_test(a, b)
        n_ab, n_ba = metrics.mcnemar_counts(a, b)
        out.append({"fold": int(f), "candidate_only_correct": n_ab, "reference_only_correct": n_ba,
                    "statistic": stat, "p": p})
    return out


def render_figures(out: Path, predictions: list[dict], summary_methods: dict) -> list[Path]:
    from pcamil import plotting

    fig_dir = out / "figures"
    curves: dict[str, list] = {}
    grouped: dict[tuple[str, str], list[dict]] = {}
    for r in predictions:
        if r["fold"] == "all":
            continue
        grouped.setdefault((r["method"], r["fold"]), []).append(r)
    for (method, fold) in sorted(grouped, key=lambda k: (METHODS.index(k[0]), int(k[1]))):
        rows = grouped[(method, fold)]
        curves.setdefault(method, []).append(
            (np.array([r["y"] for r in rows]), np.array([r["score"] for r in rows]))
        )
    files = []
    if curves:
        files += plotting.curve_figures(curves, fig_dir)
    scored = {m: v for m, v in summary_methods.items() if "auroc" in v and "mean" in v["auroc"]}
    if scored:
        files.append(plotting.metric_bars(scored, fig_dir))
    return files


def rebuild_report(output_dir, figures: bool = True) -> dict:
    """Recompute ``summary.json`` (and figures) from existing fold CSVs."""
    out = Path(output_dir)
    rows = read_fold_rows(out / "folds.csv")
    preds = read_predictions(out / "predictions.csv")
    old = {}
    if (out / "summary.json").exists():
        old = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    summary = summarize(rows, preds, old.get("config"), old.get("checkpoint_epochs"))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if figures:
        render_figures(out, preds, summary["methods"])
    return summary


# ---------------------------------------------------------------- sweeps


def hyperparameter_sweep(cfg: ExperimentConfig, axis: str, values: Sequence[float],
                         figures: bool | None = None) -> list[dict]:
    """Validation-fold grid over one axis using the CIMIL-CRC arm.

    Only the training manifest is read. Per value, every fold trains on its
    training portion and is scored on its validation portion; F1 and kappa
    are averaged across folds. Writes ``sweep_<axis>.csv``.
    """
    if axis not in SWEEP_AXES:
        raise InvalidConfig(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values)
    if not values:
        raise InvalidConfig("sweep needs at least one value")
    if cfg.train_manifest is None:
        raise InvalidConfig("sweep needs train_manifest")
    figures = cfg.figures if figures is None else figures
    # no handle on the test manifest exists past this point
    cfg = replace(cfg, test_manifest=None)

    k_max = max([int(v) for v in values]) if axis == "k_eigenvectors" else cfg.k_eigenvectors
    train = load_cohort(load_manifest(cfg.train_manifest, "train"), k_max)
    folds = stratified_kfold(train.manifest.labels, cfg.n_folds, cfg.seed)
    all_idx = np.arange(len(train.ids))

    trained: dict[tuple, FoldModels] = {}
    rows = []
    for value in values:
        vcfg = _sweep_config(cfg, axis, value)
        f1s, kappas, aurocs = [], [], []
        for f, val_idx in enumerate(folds):
            key = (f, vcfg.k_eigenvectors, vcfg.alpha)
            if key not in trained:
                trained[key] = train_fold_models(vcfg, train, np.setdiff1d(all_idx, val_idx), f,
                                                 need_baseline=False)
            s = score_cohort(vcfg, trained[key], train, val_idx)["CIMIL-CRC"]
            y = train.y[val_idx]
            rep = metrics.binary_report(y, s, vcfg.threshold)
            f1s.append(rep.f1)
            kappas.append(rep.kappa)
            aurocs.append(metrics.roc_auc(y, s))
        rows.append({
            "axis": axis,
            "value": float(value) if axis != "k_eigenvectors" else int(value),
            "f1_mean": float(np.mean(f1s)),
            "f1_sd": float(np.std(f1s, ddof=1)) if len(f1s) > 1 else 0.0,
            "kappa_mean": float(np.mean(kappas)),
            "kappa_sd": float(np.std(kappas, ddof=1)) if len(kappas) > 1 else 0.0,
            "auroc_mean": float(np.mean(aurocs)),
        })

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["axis", "value", "f1_mean", "f1_sd", "kappa_mean", "kappa_sd", "auroc_mean"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r["axis"], r["value"], *(_fmt(r[c]) for c in cols[2:])])
    (out / f"sweep_{axis}.csv").write_text(buf.getvalue(), encoding="utf-8")
    if figures:
        from pcamil import plotting

        plotting.sweep_figure(axis, rows, out / "figures")
    return rows


def _sweep_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "k_eigenvectors":
        return replace(cfg, k_eigenvectors=int(value))
    if axis == "alpha":
        return replace(cfg, alpha=float(value))
    return replace(cfg, prior=replace(cfg.prior, beta=float(value)))
