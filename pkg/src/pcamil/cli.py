"""Command line entry point: ``pcamil <subcommand>``.

Exit codes: 0 success, 2 invalid config, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from pcamil import harness
from pcamil.data import SynthConfig, generate_synthetic, load_bags, load_manifest
from pcamil.embed import patient_embedding, write_eigenbasis
from pcamil.errors import InvalidConfig, PcamilError
from pcamil.mil import history_csv, save_checkpoint


def _fail(exc: PcamilError):
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(exc.exit_code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PcamilError as exc:
            _fail(exc)

    return wrapper


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidConfig(f"cannot parse value list {text!r}") from None


# flag name -> (path into ExperimentConfig dict)
_EXPERIMENT_FLAGS = {
    "train_manifest": ("train_manifest",),
    "test_manifest": ("test_manifest",),
    "n_folds": ("n_folds",),
    "k_eigenvectors": ("k_eigenvectors",),
    "alpha": ("alpha",),
    "output_dir": ("output_dir",),
    "seed": ("seed",),
    "threshold": ("threshold",),
    "eigen_scaling": ("eigen_scaling",),
    "beta": ("prior", "beta"),
    "left_weight": ("prior", "left_weight"),
    "epochs": ("mil", "epochs"),
    "lr": ("mil", "lr"),
    "d_hidden": ("mil", "d_hidden"),
    "d_att": ("mil", "d_att"),
    "n_heads": ("mil", "n_heads"),
}


def experiment_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON file with ExperimentConfig fields."),
        click.option("--train-manifest", type=click.Path(dir_okay=False)),
        click.option("--test-manifest", type=click.Path(dir_okay=False)),
        click.option("--n-folds", type=int),
        click.option("--k-eigenvectors", type=int),
        click.option("--alpha", type=float, help="Label smoothing rate."),
        click.option("--beta", type=float, help="Prior weight for right/undefined side."),
        click.option("--left-weight", type=float),
        click.option("--methods", help="Comma-separated subset of " + ",".join(harness.METHODS)),
        click.option("--output-dir", type=click.Path(file_okay=False)),
        click.option("--seed", type=int),
        click.option("--threshold", type=float),
        click.option("--eigen-scaling", type=click.Choice(["none", "sqrt"])),
        click.option("--epochs", type=int),
        click.option("--lr", type=float),
        click.option("--d-hidden", type=int),
        click.option("--d-att", type=int),
        click.option("--n-heads", type=int),
        click.option("--figures/--no-figures", default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def build_config(config_path=None, methods=None, figures=None, **flags) -> harness.ExperimentConfig:
    """JSON file values first, then any CLI flag that was given."""
    data: dict = {}
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(data, dict):
            raise InvalidConfig("config file must hold a JSON object")
    for name, value in flags.items():
        if value is None:
            continue
        path = _EXPERIMENT_FLAGS[name]
        target = data
        for key in path[:-1]:
            target = target.setdefault(key, {})
        target[path[-1]] = value
    if methods is not None:
        data["methods"] = [m.strip() for m in methods.split(",") if m.strip()]
    if figures is not None:
        data["figures"] = figures
    return harness.ExperimentConfig.from_dict(data)


@click.group()
@click.option("-v", "--verbose", count=True)
def cli(verbose):
    """PCA-embedded, clinically-informed attention MIL for MSI/MSS bags."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON file with SynthConfig fields.")
@click.option("--n-train", type=int, default=260, show_default=True)
@click.option("--n-test", type=int, default=100, show_default=True)
@click.option("--msi-fraction", type=float)
@click.option("--patches-min", type=int)
@click.option("--patches-max", type=int)
@click.option("--feature-dim", type=int)
@click.option("--signal-rank", type=int)
@click.option("--noise-sigma", type=float)
@click.option("--p-ambiguous", type=float)
@click.option("--p-undefined", type=float)
@click.option("--seed", type=int)
@handle_errors
def synth(out_dir, config_path, n_train, n_test, **flags):
    """Write a synthetic train (and test) cohort: bags plus manifests."""
    data = {}
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {config_path}: {exc}") from None
    data.update({k: v for k, v in flags.items() if v is not None})
    data.pop("n_patients", None)
    base = SynthConfig.from_dict(data)
    splits = [("train", n_train)] + ([("test", n_test)] if n_test > 0 else [])
    for split, n in splits:
        m = generate_synthetic(replace(base, n_patients=n), out_dir, split)
        n_msi = sum(r.label.y for r in m.records)
        click.echo(f"{split}: {len(m)} patients ({n_msi} MSI) -> {Path(out_dir) / (split + '.csv')}")


@cli.command()
@click.option("--manifest", type=click.Path(dir_okay=False), required=True)
@click.option("--k", "k", type=int, default=90, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@handle_errors
def embed(manifest, k, out_dir):
    """Cache each patient's top-k eigenvectors as MILE files."""
    m = load_manifest(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ks = []
    for pid, bag in load_bags(m).items():
        basis = patient_embedding(bag, k)
        write_eigenbasis(basis, out / f"{pid}.mile")
        ks.append(basis.k)
    click.echo(f"wrote {len(ks)} eigenbases to {out} (k' from {min(ks)} to {max(ks)})")


@cli.command()
@experiment_options
@click.option("--fold", type=int, default=0, show_default=True)
@handle_errors
def train(fold, **kw):
    """Train the MIL model of one fold and score its validation portion."""
    cfg = build_config(**kw)
    if cfg.train_manifest is None:
        raise InvalidConfig("--train-manifest is required")
    if not 0 <= fold < cfg.n_folds:
        raise InvalidConfig(f"--fold must lie in [0, {cfg.n_folds})")
    cohort = harness.load_cohort(load_manifest(cfg.train_manifest, "train"), cfg.k_eigenvectors)
    folds = harness.stratified_kfold(cohort.manifest.labels, cfg.n_folds, cfg.seed)
    val = folds[fold]
    train_idx = np.setdiff1d(np.arange(len(cohort.ids)), val)
    models = harness.train_fold_models(cfg, cohort, train_idx, fold, need_baseline=False)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.mil_config(cohort.feature_dim, harness.fold_seed(cfg.seed, fold))
    save_checkpoint(models.mil.params, mcfg, out / f"fold{fold}.milm")
    (out / f"history_fold{fold}.csv").write_text(history_csv(models.history), encoding="utf-8")
    scores = harness.score_cohort(cfg, models, cohort, val)
    click.echo("method,auroc,auprc,f1,kappa,accuracy")
    for method in ("MIL-CRC", "CIMIL-CRC"):
        m = harness.method_metrics(cohort.y[val], scores[method], cfg.threshold)
        click.echo(",".join([method] + [f"{m[k]:.4f}" for k in harness.METRIC_NAMES]))
    ck = models.mil.checkpoint_epoch
    click.echo(f"checkpoint epoch: {ck if ck is not None else 'none (final epoch used)'}", err=True)


def _print_summary(summary: dict):
    click.echo("method,auroc_mean,auprc_mean,f1_mean,kappa_mean,accuracy_mean")
    for method in harness.METHODS:
        cell = summary["methods"].get(method)
        if cell is None:
            continue
        vals = []
        for k in harness.METRIC_NAMES:
            c = cell.get(k)
            vals.append("" if c is None else f"{c.get('mean', c.get('value')):.4f}")
        click.echo(",".join([method, *vals]))
    for t in summary["tests"]:
        tt = t.get("t_test_auroc")
        if tt:
            click.echo(f"# paired t (AUROC) {t['candidate']} vs {t['reference']}: t={tt['t']}, p={tt['p']:.4g}", err=True)


@cli.command()
@experiment_options
@handle_errors
def run(**kw):
    """Full cross-validated experiment on the external test manifest."""
    cfg = build_config(**kw)
    rep = harness.run_experiment(cfg)
    _print_summary(rep.summary)
    click.echo(f"# reports written to {rep.output_dir}", err=True)


@cli.command()
@experiment_options
@click.option("--axis", type=click.Choice(harness.SWEEP_AXES), required=True)
@click.option("--values", "values_text", required=True, help="Comma-separated grid, e.g. 0.8,0.9,1")
@handle_errors
def sweep(axis, values_text, **kw):
    """Validation-fold grid over k_eigenvectors, alpha or beta."""
    cfg = build_config(**kw)
    rows = harness.hyperparameter_sweep(cfg, axis, _csv_floats(values_text))
    click.echo("axis,value,f1_mean,kappa_mean")
    for r in rows:
        click.echo(f"{r['axis']},{r['value']},{r['f1_mean']:.4f},{r['kappa_mean']:.4f}")


@cli.command()
@click.option("--output-dir", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--figures/--no-figures", default=True)
@handle_errors
def report(output_dir, figures):
    """Re-aggregate folds.csv/predictions.csv into summary.json and figures."""
    try:
        summary = harness.rebuild_report(output_dir, figures)
    except FileNotFoundError as exc:
        raise InvalidConfig(f"missing report input: {exc.filename}") from None
    _print_summary(summary)


def main():
    cli()


if __name__ == "__main__":
    main()
