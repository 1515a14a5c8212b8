"""``amf-fuse`` command line.

Every stage reads a flat JSON config, echoes the resolved config to the
output directory, and writes CSV results plus PNG figures next to them.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .attribution import attribution_table
from .checkpoint import load_arrays
from .config import STAGES, ConfigError, RunConfig, load_config, write_resolved
from .data import DataError, Dataset, ingest_csv, synthetic_dataset
from .fusion import compute_lengths, confidence_ratio
from .metrics import MetricReport

log = logging.getLogger("amffuse")


def _resolve(path, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def load_dataset(cfg: RunConfig, base: Path = Path(".")) -> Dataset:
    """The synthetic task, or a CSV described by ``cfg.schema``."""
    if cfg.dataset == "synthetic":
        return synthetic_dataset(cfg.synthetic_n, cfg.synthetic_seed,
                                 size=cfg.image_height)
    if not cfg.schema:
        raise ConfigError("a CSV dataset needs a 'schema' mapping column -> kind")
    embeddings = None
    if cfg.embeddings:
        arrays, _ = load_arrays(_resolve(cfg.embeddings, base))
        if len(arrays) != 1 and "embeddings" not in arrays:
            raise ConfigError("embedding file must hold one array (or one named 'embeddings')")
        embeddings = arrays.get("embeddings", next(iter(arrays.values())))
    return ingest_csv(_resolve(cfg.dataset, base), cfg.schema, np.random.default_rng(cfg.seed),
                      embeddings=embeddings)


def _checkpoint(cfg: RunConfig, base: Path) -> Path:
    if not cfg.checkpoint:
        raise ConfigError(f"stage {cfg.stage!r} needs 'checkpoint' in the config")
    return _resolve(cfg.checkpoint, base)


def _write_rows(path: Path, rows: list[dict]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})
    return path


# -- stages ------------------------------------------------------------------

def cmd_pretrain(cfg, ds, out, base):
    from .plotting import plot_loss_curve
    from .training import run_pretrain

    resume = _resolve(cfg.resume, base) if cfg.resume else None
    res = run_pretrain(cfg, ds, cfg.seed, out, resume=resume)
    plot_loss_curve(res.epoch_losses, out / "pretrain_loss.png")
    print(f"pretraining loss {res.epoch_losses[0]:.4f} -> {res.epoch_losses[-1]:.4f}; checkpoint {res.checkpoint}")
    return 0


def cmd_finetune(cfg, ds, out, base):
    from .plotting import plot_finetune_curves, plot_metric_report
    from .training import run_finetune

    res = run_finetune(cfg, ds, _checkpoint(cfg, base), out)
    plot_metric_report(res.report, out / "metrics.png", f"fused test {cfg.metric} ({cfg.strategy})")
    plot_finetune_curves(res.curves, out / "finetune_curves.png", cfg.metric)
    print(res.report.summary())
    return 0


def cmd_eval(cfg, ds, out, base):
    from .plotting import plot_metric_report
    from .training import evaluate_model, load_finetuned

    ck = _checkpoint(cfg, base)
    paths = sorted(ck.glob("finetune_seed*.manifest")) if ck.is_dir() else [ck]
    if not paths:
        raise ConfigError(f"no fine-tuned checkpoints under {ck}")
    report = MetricReport(cfg.metric)
    for p in paths:
        model, run_cfg, _ = load_finetuned(p)
        _, meta = load_arrays(p)
        report.add(int(meta["seed"]), evaluate_model(model, run_cfg, ds.test))
    report.write_csv(out / "eval_metrics.csv")
    plot_metric_report(report, out / "eval_metrics.png", f"test {cfg.metric}")
    print(report.summary())
    return 0


def cmd_unimodal(cfg, ds, out, base):
    from .training import unimodal_eval

    ck = _checkpoint(cfg, base)
    strategy = cfg.r_conf_source if cfg.r_conf_source != "config" else "frozen"
    rows = []
    for seed in cfg.seeds:
        m_img = unimodal_eval(cfg, ck, "image", ds, seed, strategy)
        m_tab = unimodal_eval(cfg, ck, "tabular", ds, seed, strategy)
        r = confidence_ratio(m_img, m_tab)
        l_img, l_tab = compute_lengths(cfg.d_out, r)
        rows.append({"seed": seed, "strategy": strategy, "image_metric": m_img, "tabular_metric": m_tab,
                     "r_conf": r, "l_img": l_img, "l_tab": l_tab})
        print(f"seed {seed}: image {m_img:.4f} tabular {m_tab:.4f} r_conf {r:.2f} -> ({l_img}, {l_tab})")
    _write_rows(out / "unimodal.csv", rows)
    return 0


def cmd_noise(cfg, ds, out, base):
    from .plotting import plot_noise_trend
    from .training import run_noise_sim, summarize_noise

    rows = run_noise_sim(cfg, ds, _checkpoint(cfg, base))
    summary = summarize_noise(rows)
    _write_rows(out / "noise_runs.csv", rows)
    _write_rows(out / "noise_summary.csv", summary)
    plot_noise_trend(summary, out / "noise_trend.png", cfg.metric)
    for s in summary:
        print(f"{s['kind']:>11s} {s['level']:.2f}: {cfg.metric} {s['metric']:.4f} "
              f"r_conf {s['r_conf']:.2f} L_img {s['l_img']:.0f}")
    return 0


def cmd_attrib(cfg, ds, out, base):
    from .plotting import plot_attributions
    from .training import tabular_attributions

    scores, metric = tabular_attributions(cfg, _checkpoint(cfg, base), ds, cfg.seed)
    num = ds.schema.numerical_index
    names = [ds.schema.names[i] for i in num]
    table = attribution_table(scores[:, num], names)
    with (out / "attributions.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "mean_score", "percentage"])
        for name, score, pct in table:
            w.writerow([name, f"{score:.8f}", f"{pct:.4f}"])
    plot_attributions(table, out / "attributions.png")
    print(f"tabular model test {cfg.metric} {metric:.4f}; top feature {table[0][0]} ({table[0][2]:.1f}%)")
    return 0


def cmd_grad_check(cfg, ds, out, base):
    from .gradsuite import TOLERANCE, run_grad_suite

    results = run_grad_suite(cfg.seed, points=3)
    _write_rows(out / "grad_check.csv", [{"check": r.name, "max_rel_err": r.max_rel_err,
                                          "passed": r.passed} for r in results])
    bad = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_rel_err)
    print(f"{len(results) - len(bad)}/{len(results)} checks below {TOLERANCE:g}; "
          f"worst {worst.name} {worst.max_rel_err:.2e}")
    return 1 if bad else 0


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "unimodal-eval": cmd_unimodal, "noise-sim": cmd_noise, "attrib": cmd_attrib,
            "grad-check": cmd_grad_check}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amf-fuse", description="Image-tabular fusion training and evaluation.")
    ap.add_argument("stage", choices=STAGES)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="run a single seed (overrides seed and seeds)")
    ap.add_argument("--out", default=None, help="output directory (default: runs/<stage>)")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    cfg_path = Path(args.config)
    overrides = {"stage": args.stage}
    if args.seed is not None:
        overrides.update(seed=args.seed, seeds=[args.seed])
    try:
        cfg = load_config(cfg_path, **overrides)
        out = Path(args.out) if args.out else Path("runs") / args.stage
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out)
        base = cfg_path.resolve().parent
        ds = None if args.stage == "grad-check" else load_dataset(cfg, base)
        return COMMANDS[args.stage](cfg, ds, out, base)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"amf-fuse: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
