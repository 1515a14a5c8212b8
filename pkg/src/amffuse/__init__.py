"""Image-tabular fusion: feature tokenizer, selective state-space tabular
encoder, contrastive pretraining, and adaptive modulation and fusion (AMF)."""

from .config import ConfigError, RunConfig, load_config
from .contrastive import itc_loss
from .data import Dataset, ingest_csv, rfm_noise, synthetic_dataset
from .fusion import FusionConfig, compute_lengths, confidence_ratio, leakage_loss, magnitude_loss
from .metrics import MetricReport, auc, top1_acc
from .tensor import Tensor, grad_check, selective_scan

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Dataset", "FusionConfig", "MetricReport", "RunConfig", "Tensor",
    "auc", "compute_lengths", "confidence_ratio", "grad_check", "ingest_csv", "itc_loss",
    "leakage_loss", "load_config", "magnitude_loss", "rfm_noise", "selective_scan",
    "synthetic_dataset", "top1_acc",
]
