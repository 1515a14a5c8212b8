"""Training orchestration: contrastive pretraining, AMF fine-tuning, unimodal
evaluation, noise sweeps and attribution runs.

Randomness is derived from ``(seed, purpose[, epoch])`` so every run is
reproducible and a pretraining run resumed from an epoch checkpoint follows
exactly the same trajectory as an uninterrupted one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attribution import integrated_gradients
from .checkpoint import load_arrays, prefixed, save_arrays, strip_prefix
from .config import ConfigError, RunConfig
from .contrastive import PretrainModel, pretrain_step
from .data import Dataset, Split, batches, image_noise, rfm_noise, weighted_epoch_indices
from .fusion import FusionClassifier, FusionConfig, classification_loss, confidence_ratio, finetune_loss
from .image import augment_images, build_image_encoder
from .metrics import MetricReport, evaluate
from .nn import Adam, EarlyStopping, Linear, Module, warmup_cosine
from .ssm import TabularEncoder
from .tensor import Tensor
from .tokenizer import TabularSchema, corrupt_tabular

log = logging.getLogger(__name__)

# rng stream tags
_INIT, _EPOCH, _HEAD, _FT_EPOCH, _RFM, _IMG_NOISE = range(6)
EVAL_BATCH = 512


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def build_encoders(cfg: RunConfig, schema: TabularSchema, rng: np.random.Generator) -> tuple[Module, TabularEncoder]:
    return build_image_encoder(cfg.image_config(), rng), TabularEncoder(schema, cfg.encoder_config(), rng)


# -- pretraining -------------------------------------------------------------

@dataclass
class PretrainResult:
    model: PretrainModel
    epoch_losses: list[float]
    step_losses: list[float]
    checkpoint: Path | None = None


def _pretrain_state(model: PretrainModel, opt: Adam) -> dict[str, np.ndarray]:
    arrays = {}
    arrays.update(prefixed(model.image_encoder.state_dict(), "image_encoder."))
    arrays.update(prefixed(model.tabular_encoder.state_dict(), "tabular_encoder."))
    arrays.update(prefixed(model.phi_img.state_dict(), "phi_img."))
    arrays.update(prefixed(model.phi_tab.state_dict(), "phi_tab."))
    arrays.update(prefixed(opt.state_dict(), "opt."))
    return arrays


def save_pretrain_checkpoint(path, model: PretrainModel, opt: Adam, cfg: RunConfig, schema: TabularSchema,
                             epoch: int, seed: int) -> Path:
    meta = {"kind": "pretrain", "epoch": epoch, "seed": seed, "config": cfg.to_dict(),
            "schema": schema.to_dict()}
    return save_arrays(path, _pretrain_state(model, opt), meta)


def load_encoders(checkpoint, cfg: RunConfig, schema: TabularSchema, rng: np.random.Generator):
    """Build encoders per ``cfg`` and load pretrained weights into them."""
    arrays, meta = load_arrays(checkpoint) if not isinstance(checkpoint, dict) else (checkpoint, {})
    img, tab = build_encoders(cfg, schema, rng)
    try:
        img.load_state_dict(strip_prefix(arrays, "image_encoder."))
        tab.load_state_dict(strip_prefix(arrays, "tabular_encoder."))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not match the configured encoders: {exc}") from exc
    return img, tab


def _image_batch(split: Split, idx: np.ndarray) -> np.ndarray:
    return split.image_input[idx]


def run_pretrain(cfg: RunConfig, dataset: Dataset, seed: int | None = None, out_dir=None,
                 resume=None, epochs_to_run: int | None = None, save_every: int = 0) -> PretrainResult:
    """Contrastive pretraining of both encoders and projection heads.

    Writes ``pretrain.manifest``/``pretrain.bin`` and ``pretrain_loss.csv``
    to ``out_dir`` when given. ``epochs_to_run`` stops early without
    changing the learning-rate schedule (which spans ``cfg.pretrain_epochs``).
    """
    if cfg.strategy == "frozen":
        raise ConfigError("the frozen strategy cannot be used for pretraining")
    seed = cfg.seed if seed is None else seed
    train = dataset.train
    if len(train) < 2:
        raise ValueError("pretraining needs at least two training pairs")
    img, tab = build_encoders(cfg, dataset.schema, _rng(seed, _INIT))
    model = PretrainModel(img, tab, cfg.d_proj, _rng(seed, _INIT, 1))
    opt = Adam(model.parameters(), lr=cfg.pretrain_lr, weight_decay=cfg.pretrain_weight_decay)
    start = 0
    if resume is not None:
        arrays, meta = load_arrays(resume)
        model.image_encoder.load_state_dict(strip_prefix(arrays, "image_encoder."))
        model.tabular_encoder.load_state_dict(strip_prefix(arrays, "tabular_encoder."))
        model.phi_img.load_state_dict(strip_prefix(arrays, "phi_img."))
        model.phi_tab.load_state_dict(strip_prefix(arrays, "phi_tab."))
        opt.load_state_dict(strip_prefix(arrays, "opt."))
        start = int(meta["epoch"])
        seed = int(meta.get("seed", seed))
    stop = cfg.pretrain_epochs if epochs_to_run is None else min(cfg.pretrain_epochs, start + epochs_to_run)
    use_aug = cfg.image_mode == "conv-small" and cfg.augment_prob > 0
    out = Path(out_dir) if out_dir is not None else None
    epoch_losses, step_losses = [], []
    for epoch in range(start, stop):
        rng = _rng(seed, _EPOCH, epoch)
        opt.lr = warmup_cosine(epoch, cfg.pretrain_lr, cfg.pretrain_epochs, cfg.warmup_epochs)
        losses = []
        for idx in batches(rng.permutation(len(train)), cfg.batch_size):
            if len(idx) < 2:
                continue
            images = _image_batch(train, idx)
            if use_aug:
                images = augment_images(images, rng, cfg.augment_prob)
            rows = corrupt_tabular(train.tab[idx], cfg.corruption_rate, rng, train.tab)
            loss = pretrain_step(images, rows, model, opt, cfg.temperature, cfg.itc_form)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch}")
            losses.append(loss)
        step_losses += losses
        epoch_losses.append(float(np.mean(losses)))
        log.info("pretrain epoch %d lr %.2e loss %.5f", epoch, opt.lr, epoch_losses[-1])
        if out is not None and save_every and (epoch + 1) % save_every == 0:
            save_pretrain_checkpoint(out / f"pretrain_epoch{epoch + 1}", model, opt, cfg, dataset.schema,
                                     epoch + 1, seed)
    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_pretrain_checkpoint(out / "pretrain", model, opt, cfg, dataset.schema, stop, seed)
        with open(out / "pretrain_loss.csv", "w") as fh:
            fh.write("epoch,loss\n")
            for e, l in enumerate(epoch_losses, start=start):
                fh.write(f"{e},{l:.10f}\n")
    return PretrainResult(model, epoch_losses, step_losses, ckpt)


def pretrained_arrays(result: PretrainResult) -> dict[str, np.ndarray]:
    """Encoder weights of a pretraining result, in checkpoint naming."""
    arrays = prefixed(result.model.image_encoder.state_dict(), "image_encoder.")
    arrays.update(prefixed(result.model.tabular_encoder.state_dict(), "tabular_encoder."))
    return arrays


# -- shared supervised loop --------------------------------------------------

def _embed(encoder: Module, inputs: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([encoder(inputs[idx]).data for idx in batches(np.arange(len(inputs)), EVAL_BATCH)])


@dataclass
class _Views:
    """Per-split inputs for a supervised model: raw data or cached embeddings."""
    train: tuple
    val: tuple
    test: tuple


def _epoch_indices(cfg: RunConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if cfg.sampler_enabled:
        return weighted_epoch_indices(labels, rng, cfg.sampler_factors)
    return rng.permutation(len(labels))


@dataclass
class FitResult:
    val_metric: float
    curve: list[dict] = field(default_factory=list)


def _fit(model: Module, params: list, forward, views: _Views, labels: dict[str, np.ndarray], cfg: RunConfig,
         seed: int, lr: float, loss_fn, epochs: int) -> FitResult:
    """Adam + early stopping on the validation metric; restores the best weights."""
    opt = Adam(params, lr=lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    best_state = model.state_dict()
    curve = []
    for epoch in range(epochs):
        rng = _rng(seed, _FT_EPOCH, epoch)
        losses = []
        for idx in batches(_epoch_indices(cfg, labels["train"], rng), cfg.finetune_batch_size):
            opt.zero_grad()
            out = forward(*(v[idx] for v in views.train))
            loss = loss_fn(out, labels["train"][idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = _predict(forward, views.val)
        metric = evaluate(val, labels["val"], cfg.metric)["primary"]
        curve.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_metric": metric})
        if stopper.update(metric):
            best_state = model.state_dict()
        if stopper.should_stop:
            break
    model.load_state_dict(best_state)
    return FitResult(stopper.best, curve)


def _predict(forward, inputs: tuple) -> np.ndarray:
    n = len(inputs[0])
    with T.no_grad():
        outs = [_logits(forward(*(v[idx] for v in inputs))).data for idx in batches(np.arange(n), EVAL_BATCH)]
    return np.concatenate(outs)


def _logits(out) -> Tensor:
    return out[0] if isinstance(out, tuple) else out


def _squeeze_binary(logits: np.ndarray, cfg: RunConfig) -> np.ndarray:
    return logits.reshape(-1) if cfg.task == "binary-weighted" else logits


# -- unimodal models ---------------------------------------------------------

class UnimodalClassifier(Module):
    def __init__(self, encoder: Module, n_outputs: int, rng: np.random.Generator):
        self.encoder = encoder
        self.head = Linear(encoder.out_dim, n_outputs, rng)

    def forward(self, x) -> Tensor:
        return self.head(self.encoder(x))


def unimodal_eval(cfg: RunConfig, checkpoint, modality: str, dataset: Dataset, seed: int | None = None,
                  strategy: str = "frozen", return_model: bool = False):
    """Train a fresh linear head on one pretrained encoder; return the test metric."""
    if modality not in ("image", "tabular"):
        raise ValueError(f"unknown modality {modality!r}")
    seed = cfg.seed if seed is None else seed
    img, tab = load_encoders(checkpoint, cfg, dataset.schema, _rng(seed, _INIT))
    encoder = img if modality == "image" else tab
    model = UnimodalClassifier(encoder, cfg.n_outputs, _rng(seed, _HEAD, 0 if modality == "image" else 1))
    pick = (lambda s: s.image_input) if modality == "image" else (lambda s: s.tab)
    labels = {s: dataset.split(s).labels for s in ("train", "val", "test")}
    if strategy == "frozen":
        encoder.requires_grad_(False)
        views = _Views(*((_embed(encoder, pick(dataset.split(s))),) for s in ("train", "val", "test")))
        forward = lambda z: model.head(Tensor(z))  # noqa: E731
        params = model.head.parameters()
    else:
        views = _Views(*((pick(dataset.split(s)),) for s in ("train", "val", "test")))
        forward = model
        params = model.parameters()

    def loss_fn(out, y):
        return classification_loss(out, y, cfg.task, cfg.class_weights)

    _fit(model, params, forward, views, labels, cfg, seed + 7919 * (modality == "tabular"), cfg.lr, loss_fn,
         cfg.unimodal_epochs)
    test = _squeeze_binary(_predict(forward, views.test), cfg)
    metric = evaluate(test, labels["test"], cfg.metric)["primary"]
    return (metric, model) if return_model else metric


def resolve_r_conf(cfg: RunConfig, checkpoint, dataset: Dataset, seed: int) -> tuple[float, dict]:
    """r_conf from config, or from unimodal metrics of the frozen / trainable encoders."""
    if cfg.r_conf_source == "config":
        return float(cfg.r_conf), {}
    strategy = cfg.r_conf_source
    m_img = unimodal_eval(cfg, checkpoint, "image", dataset, seed, strategy)
    m_tab = unimodal_eval(cfg, checkpoint, "tabular", dataset, seed, strategy)
    return confidence_ratio(m_img, m_tab), {"image_metric": m_img, "tabular_metric": m_tab}


# -- fine-tuning -------------------------------------------------------------

@dataclass
class FinetuneResult:
    report: MetricReport
    models: dict[int, FusionClassifier]
    curves: dict[int, list[dict]]
    r_conf: dict[int, float]
    checkpoints: dict[int, Path] = field(default_factory=dict)
    unimodal: dict[int, dict] = field(default_factory=dict)


def finetune_seed(cfg: RunConfig, dataset: Dataset, checkpoint, seed: int, r_conf: float,
                  lr: float | None = None) -> tuple[FusionClassifier, FitResult, dict[str, float]]:
    """Fine-tune one fused model; returns it with its fit history and test metrics."""
    img, tab = load_encoders(checkpoint, cfg, dataset.schema, _rng(seed, _INIT))
    fcfg = cfg.fusion_config(r_conf)
    model = FusionClassifier(img, tab, fcfg, cfg.n_outputs, _rng(seed, _HEAD, 2))
    labels = {s: dataset.split(s).labels for s in ("train", "val", "test")}
    if cfg.strategy == "frozen":
        img.requires_grad_(False)
        tab.requires_grad_(False)
        views = _Views(*((_embed(img, dataset.split(s).image_input), _embed(tab, dataset.split(s).tab))
                         for s in ("train", "val", "test")))
        forward = lambda zi, zt: model.forward_embeddings(Tensor(zi), Tensor(zt))  # noqa: E731
        params = model.fusion_parameters()
    else:
        views = _Views(*((dataset.split(s).image_input, dataset.split(s).tab) for s in ("train", "val", "test")))
        forward = model
        params = model.parameters()

    def loss_fn(out, y):
        logits, feats = out
        return finetune_loss(logits, y, feats, fcfg.lambda1, fcfg.lambda2, cfg.task, fcfg, cfg.class_weights)

    fit = _fit(model, params, forward, views, labels, cfg, seed, cfg.lr if lr is None else lr, loss_fn, cfg.epochs)
    test = _squeeze_binary(_predict(forward, views.test), cfg)
    return model, fit, evaluate(test, labels["test"], cfg.metric)


def save_finetune_checkpoint(path, model: FusionClassifier, cfg: RunConfig, schema: TabularSchema, seed: int,
                             fcfg: FusionConfig) -> Path:
    meta = {"kind": "finetune", "seed": seed, "r_conf": fcfg.r_conf, "l_img": fcfg.l_img, "l_tab": fcfg.l_tab,
            "config": cfg.to_dict(), "schema": schema.to_dict()}
    return save_arrays(path, prefixed(model.state_dict(), "model."), meta)


def load_finetuned(path) -> tuple[FusionClassifier, RunConfig, TabularSchema]:
    from .config import config_from_dict

    arrays, meta = load_arrays(path)
    if meta.get("kind") != "finetune":
        raise ConfigError(f"{path} is not a fine-tuned checkpoint")
    cfg = config_from_dict(meta["config"])
    schema = TabularSchema.from_dict(meta["schema"])
    rng = _rng(0)
    img, tab = build_encoders(cfg, schema, rng)
    model = FusionClassifier(img, tab, cfg.fusion_config(meta["r_conf"]), cfg.n_outputs, rng)
    model.load_state_dict(strip_prefix(arrays, "model."))
    return model, cfg, schema


def select_lr(cfg: RunConfig, dataset: Dataset, checkpoint, r_conf: float | None = None) -> tuple[float, dict]:
    """Pick the fine-tuning lr from cfg.lr_sweep by validation metric at cfg.seed.

    Returns (cfg.lr, {}) when no sweep is configured.
    """
    if not cfg.lr_sweep:
        return cfg.lr, {}
    if r_conf is None:
        r_conf, _ = resolve_r_conf(cfg, checkpoint, dataset, cfg.seed)
    scores = {}
    for cand in cfg.lr_sweep:
        _, fit, _ = finetune_seed(cfg, dataset, checkpoint, cfg.seed, r_conf, cand)
        scores[cand] = fit.val_metric
        log.info("lr %.0e: val %s = %.4f", cand, cfg.metric, fit.val_metric)
    # first candidate wins ties
    return max(cfg.lr_sweep, key=lambda c: scores[c]), scores


def run_finetune(cfg: RunConfig, dataset: Dataset, checkpoint, out_dir=None,
                 seeds: list[int] | None = None) -> FinetuneResult:
    """Fine-tune the fused model over the configured seeds and report test metrics."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    report = MetricReport(cfg.metric)
    res = FinetuneResult(report, {}, {}, {})
    out = Path(out_dir) if out_dir is not None else None
    lr, _ = select_lr(cfg, dataset, checkpoint)
    for seed in seeds:
        r_conf, uni = resolve_r_conf(cfg, checkpoint, dataset, seed)
        res.unimodal[seed] = uni
        model, fit, metrics = finetune_seed(cfg, dataset, checkpoint, seed, r_conf, lr)
        fcfg = model.amf.cfg
        report.add(seed, dict(metrics, r_conf=r_conf, l_img=fcfg.l_img, l_tab=fcfg.l_tab, lr=lr, **uni))
        res.models[seed] = model
        res.curves[seed] = fit.curve
        res.r_conf[seed] = r_conf
        log.info("seed %d: %s = %.4f (r_conf %.3f)", seed, cfg.metric, metrics["primary"], r_conf)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            res.checkpoints[seed] = save_finetune_checkpoint(out / f"finetune_seed{seed}", model, cfg,
                                                             dataset.schema, seed, fcfg)
            write_curve(out / f"finetune_curve_seed{seed}.csv", fit.curve)
    if out is not None:
        report.write_csv(out / "metrics.csv")
    return res


def evaluate_model(model: FusionClassifier, cfg: RunConfig, split: Split) -> dict[str, float]:
    forward = model
    logits = _squeeze_binary(_predict(forward, (split.image_input, split.tab)), cfg)
    return evaluate(logits, split.labels, cfg.metric)


def write_curve(path, curve: list[dict]) -> Path:
    path = Path(path)
    keys = list(curve[0]) if curve else ["epoch"]
    with path.open("w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in curve:
            fh.write(",".join(f"{row[k]:.10g}" if isinstance(row[k], float) else str(row[k]) for k in keys) + "\n")
    return path


# -- noise simulation --------------------------------------------------------

def noise_conditions(cfg: RunConfig) -> list[tuple[str, float]]:
    return [("rfm", r) for r in cfg.rfm_rates] + [("image_sigma", s) for s in cfg.image_sigmas]


def noisy_dataset(dataset: Dataset, kind: str, level: float, seed: int) -> Dataset:
    """Apply one noise condition. The rng depends only on (seed, kind) so the
    masked RFM columns are nested across rates for a given seed."""
    if kind == "rfm":
        return rfm_noise(dataset, level, _rng(seed, _RFM))[0]
    if kind == "image_sigma":
        return image_noise(dataset, level, _rng(seed, _IMG_NOISE)) if level > 0 else dataset
    raise ValueError(f"unknown noise kind {kind!r}")


def run_noise_sim(cfg: RunConfig, dataset: Dataset, checkpoint, seeds: list[int] | None = None,
                  conditions: list[tuple[str, float]] | None = None) -> list[dict]:
    """Fine-tune from the clean pretrained checkpoint on each noisy variant.

    r_conf is recomputed per condition from frozen unimodal metrics on the
    noisy data. A configured lr sweep runs once, on the clean data.
    """
    seeds = list(cfg.seeds if seeds is None else seeds)
    lr, _ = select_lr(cfg, dataset, checkpoint)
    rows = []
    for kind, level in conditions or noise_conditions(cfg):
        for seed in seeds:
            noisy = noisy_dataset(dataset, kind, level, seed)
            m_img = unimodal_eval(cfg, checkpoint, "image", noisy, seed, "frozen")
            m_tab = unimodal_eval(cfg, checkpoint, "tabular", noisy, seed, "frozen")
            r_conf = confidence_ratio(m_img, m_tab)
            _, _, metrics = finetune_seed(cfg, noisy, checkpoint, seed, r_conf, lr)
            fcfg = cfg.fusion_config(r_conf)
            rows.append({"kind": kind, "level": level, "seed": seed, "metric": metrics["primary"],
                         "image_metric": m_img, "tabular_metric": m_tab, "r_conf": r_conf,
                         "l_img": fcfg.l_img, "l_tab": fcfg.l_tab})
            log.info("noise %s=%.2f seed %d: %.4f (r_conf %.3f)", kind, level, seed, metrics["primary"], r_conf)
    return rows


def summarize_noise(rows: list[dict]) -> list[dict]:
    """Mean over seeds per (kind, level)."""
    out = []
    keys = sorted({(r["kind"], r["level"]) for r in rows}, key=lambda k: (k[0] != "rfm", k[0], k[1]))
    for kind, level in keys:
        sel = [r for r in rows if r["kind"] == kind and r["level"] == level]
        out.append({"kind": kind, "level": level, "n_seeds": len(sel),
                    **{k: float(np.mean([r[k] for r in sel]))
                       for k in ("metric", "image_metric", "tabular_metric", "r_conf", "l_img", "l_tab")},
                    "metric_std": float(np.std([r["metric"] for r in sel], ddof=1)) if len(sel) > 1 else 0.0})
    return out


# -- attribution -------------------------------------------------------------

def tabular_attributions(cfg: RunConfig, checkpoint, dataset: Dataset, seed: int | None = None,
                         steps: int | None = None, max_samples: int | None = None) -> tuple[np.ndarray, float]:
    """IG scores of a unimodal tabular model for the target-class logit.

    Returns per-sample attributions (n, N) over training rows and the
    model's test metric. The baseline is the mean training row; categorical
    columns are held at each sample's own value.
    """
    seed = cfg.seed if seed is None else seed
    steps = cfg.ig_steps if steps is None else steps
    metric, model = unimodal_eval(cfg, checkpoint, "tabular", dataset, seed, "frozen", return_model=True)
    train = dataset.train
    n = min(len(train), cfg.ig_max_samples if max_samples is None else max_samples)
    rows = train.tab[_rng(seed, 99).permutation(len(train))[:n]]
    num = dataset.schema.numerical_index
    baseline = train.tab.mean(axis=0)
    target = 0 if cfg.task == "binary-weighted" else cfg.ig_target
    model.encoder.requires_grad_(False)

    def f(x: Tensor) -> Tensor:
        return model(x)[:, target]

    attributions = np.stack([integrated_gradients(f, r, baseline, steps, features=num) for r in rows])
    return attributions, metric
