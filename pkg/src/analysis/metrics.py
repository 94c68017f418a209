"""
metrics.py
Distribution-bias histograms, depth heterogeneity, rank and parameter reports
"""
import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from adaptors.lowrank import count_params
from engine.tensor import Tensor, no_grad
from models.backbone import LMAModel, MultimodalModel, TwoStreamModel
from synth.dataset import PairedDataset
from utils.data_model import BackboneConfig, FeatureSource, ModelMode
from utils.errors import ConfigError, InsufficientDataError, LMAError

logger = logging.getLogger(__name__)

NUM_BINS = 10
MIN_VALID_PAIRS = 30
RAW_TAP = "input"


def pearson_abs(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """
    |rho| between two equally sized maps, flattened.

    Returns:
        Value in [0, 1], or None when either input has zero variance
        (or fewer than two values) and the correlation is undefined
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ConfigError([f"pearson_abs needs equal sizes, got {a.size} and {b.size}"])
    if a.size < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    ss_a = float(np.dot(da, da))
    ss_b = float(np.dot(db, db))
    if ss_a <= 0.0 or ss_b <= 0.0:
        return None
    rho = float(np.dot(da, db)) / np.sqrt(ss_a * ss_b)
    return min(abs(rho), 1.0)


@dataclass
class BiasHistogram:
    """|rho| of corresponding channel maps, in 10 bins over [0, 1]"""
    tap: str
    source: FeatureSource
    counts: List[int]
    excluded: int
    channels: int
    values: List[float] = field(default_factory=list, repr=False)

    @property
    def valid_pairs(self) -> int:
        return sum(self.counts)

    @property
    def total_pairs(self) -> int:
        return self.valid_pairs + self.excluded

    @property
    def proportions(self) -> List[float]:
        total = self.valid_pairs
        return [c / total for c in self.counts]

    @property
    def mean_abs_rho(self) -> float:
        return float(np.mean(self.values))

    @staticmethod
    def bin_edges() -> np.ndarray:
        return np.linspace(0.0, 1.0, NUM_BINS + 1)


def histogram_from_features(
    a: np.ndarray, b: np.ndarray, tap: str, source: FeatureSource
) -> BiasHistogram:
    """
    Correlate every (sample, channel) map of a with the same map of b.

    Bins are [0, 0.1), ..., [0.9, 1.0]; the last bin is closed.
    """
    if a.shape != b.shape or a.ndim != 4:
        raise ConfigError([f"paired features must share an [N, C, H, W] shape, got {a.shape} and {b.shape}"])
    values, excluded = [], 0
    for n in range(a.shape[0]):
        for c in range(a.shape[1]):
            rho = pearson_abs(a[n, c], b[n, c])
            if rho is None:
                excluded += 1
            else:
                values.append(rho)
    if excluded:
        logger.info("%s/%s: excluded %d zero-variance channel pairs", tap, source.value, excluded)
    if len(values) < MIN_VALID_PAIRS:
        raise InsufficientDataError(
            f"{tap}/{source.value}: only {len(values)} valid channel pairs "
            f"({excluded} excluded); need at least {MIN_VALID_PAIRS}"
        )
    bins = np.minimum((np.asarray(values) * NUM_BINS).astype(int), NUM_BINS - 1)
    counts = np.bincount(bins, minlength=NUM_BINS)
    return BiasHistogram(
        tap=tap, source=source, counts=counts.tolist(), excluded=excluded,
        channels=a.shape[1], values=values,
    )


def paired_features(
    model: Optional[MultimodalModel],
    dataset: PairedDataset,
    source: FeatureSource,
    taps: Sequence[str],
    batch_size: int = 32,
    max_samples: Optional[int] = None,
    quiet: bool = True,
) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """
    Feature maps of both modalities at each tap, taken pre-activation.

    shared_path and adaptor_path use the split forward of an LMA model;
    two_stream uses each stream's own forward; raw_input ignores the model.
    """
    n = len(dataset) if max_samples is None else min(max_samples, len(dataset))
    if source == FeatureSource.RAW_INPUT:
        return {RAW_TAP: (dataset.visible[:n], dataset.infrared[:n])}
    if source in (FeatureSource.SHARED_PATH, FeatureSource.ADAPTOR_PATH) and not isinstance(model, LMAModel):
        raise ConfigError([f"source {source.value} needs an LMA model"])
    if source == FeatureSource.TWO_STREAM and not isinstance(model, TwoStreamModel):
        raise ConfigError(["source two_stream needs a two-stream model"])
    unknown = [t for t in taps if t not in model.config.taps]
    if unknown:
        raise ConfigError([f"unknown tap {t!r}; model has {sorted(model.config.taps)}" for t in unknown])

    collected: Dict[str, List[List[np.ndarray]]] = {t: [[], []] for t in taps}
    with no_grad():
        for start in tqdm(range(0, n, batch_size), desc=f"features/{source.value}", disable=quiet):
            idx = np.arange(start, min(start + batch_size, n))
            for m in range(2):
                x = Tensor(dataset.modality(m)[idx])
                if source == FeatureSource.TWO_STREAM:
                    features = model.forward_modality(x, m, pre_activation_taps=True).taps
                    for t in taps:
                        collected[t][m].append(features[t].data)
                else:
                    branch = 0 if source == FeatureSource.SHARED_PATH else 1
                    split = model.forward_split(x, m)
                    for t in taps:
                        collected[t][m].append(split.taps[t][branch].data)
    return {
        t: (np.concatenate(per[0]), np.concatenate(per[1])) for t, per in collected.items()
    }


def bias_histogram(
    model: Optional[MultimodalModel],
    dataset: PairedDataset,
    tap: str,
    source: Union[FeatureSource, str],
    max_samples: Optional[int] = None,
) -> BiasHistogram:
    """Histogram of |rho| between modality feature maps at one tap"""
    source = FeatureSource(source)
    key = RAW_TAP if source == FeatureSource.RAW_INPUT else tap
    a, b = paired_features(model, dataset, source, [tap], max_samples=max_samples)[key]
    return histogram_from_features(a, b, key, source)


def depth_profile(
    model: MultimodalModel,
    dataset: PairedDataset,
    source: Union[FeatureSource, str] = FeatureSource.TWO_STREAM,
    max_samples: Optional[int] = None,
) -> Dict[str, float]:
    """Heterogeneity proxy 1 - mean |rho| per tap, in data flow order"""
    source = FeatureSource(source)
    taps = sorted(model.config.taps, key=lambda t: (model.config.taps[t], t))
    features = paired_features(model, dataset, source, taps, max_samples=max_samples)
    profile = {}
    for tap in taps:
        histogram = histogram_from_features(*features[tap], tap, source)
        profile[tap] = 1.0 - histogram.mean_abs_rho
    return profile


@dataclass
class RankReport:
    """Average active adaptor rank per block, in data flow order"""
    blocks: List[str]
    averages: List[float]
    r_init: int
    r_target: int
    total_active: int
    n_adaptors: int

    @property
    def global_average(self) -> float:
        return self.total_active / self.n_adaptors if self.n_adaptors else 0.0


def rank_report(model: LMAModel, r_init: Optional[int] = None, r_target: Optional[int] = None) -> RankReport:
    """Block averages over every adaptor (all modalities) of the block's layers"""
    if not isinstance(model, LMAModel):
        raise ConfigError(["rank_report needs an LMA model"])
    per_block: Dict[int, List[int]] = {}
    for (l, m), adaptor in model.adaptor_entries():
        block = model.stack.layers[l].geometry.block
        per_block.setdefault(block, []).append(adaptor.active_rank)
    n_conv_blocks = len(model.config.blocks)
    blocks = sorted(per_block)
    active = [r for ranks in per_block.values() for r in ranks]
    return RankReport(
        blocks=[f"block{b}" if b < n_conv_blocks else "fc" for b in blocks],
        averages=[float(np.mean(per_block[b])) for b in blocks],
        r_init=model.rank if r_init is None else r_init,
        r_target=model.rank if r_target is None else r_target,
        total_active=int(sum(active)),
        n_adaptors=len(active),
    )


@dataclass
class ParamReport:
    """Parameter totals of one model kind against the unimodal model it extends"""
    model: str
    total: int
    unimodal: int
    closed_form_total: int
    storage_total: Optional[int] = None

    @property
    def increment(self) -> int:
        return self.total - self.unimodal

    @property
    def increment_percent(self) -> float:
        return 100.0 * self.increment / self.unimodal


def stack_closed_form(config: BackboneConfig) -> int:
    """Shared kernels plus biases of one feature-extraction stack"""
    return sum(
        count_params(g.c_in, g.c_out, g.kernel_size, 0).shared_params + g.c_out
        for g in config.layer_geometries()
    )


def head_closed_form(config: BackboneConfig) -> int:
    return config.num_classes * config.embedding_dim + config.num_classes


def unimodal_closed_form(config: BackboneConfig) -> int:
    return stack_closed_form(config) + head_closed_form(config)


def adaptor_closed_form(config: BackboneConfig, ranks: Sequence[int]) -> int:
    """Sum of r(K(C1+C2)+1) over adaptors; ranks are layer-major, modality-minor"""
    geometries = config.layer_geometries()
    per_layer = config.num_modalities
    if len(ranks) != len(geometries) * per_layer:
        raise ConfigError([f"expected {len(geometries) * per_layer} adaptor ranks, got {len(ranks)}"])
    return sum(
        count_params(g.c_in, g.c_out, g.kernel_size, ranks[l * per_layer + m]).adaptor_params
        for l, g in enumerate(geometries) for m in range(per_layer)
    )


def param_report(
    model_or_config: Union[MultimodalModel, BackboneConfig],
    mode: Optional[ModelMode] = None,
    rank: Optional[int] = None,
) -> ParamReport:
    """
    Closed-form counts for a config, or storage and closed form for a built model.

    For a built model the two must agree exactly.
    """
    if isinstance(model_or_config, BackboneConfig):
        config = model_or_config
        mode = mode or ModelMode.LMA_FIXED
        rank = config.rank if rank is None else rank
        n_adaptors = len(config.layer_geometries()) * config.num_modalities
        ranks = [rank] * n_adaptors
        storage = None
    else:
        model = model_or_config
        config = model.config
        mode = model.mode
        ranks = [a.rank for _, a in model.adaptor_entries()]
        storage = model.num_params()

    unimodal = unimodal_closed_form(config)
    if mode in (ModelMode.LMA_ADAPTIVE, ModelMode.LMA_FIXED):
        closed = unimodal + adaptor_closed_form(config, ranks)
    elif mode == ModelMode.TWO_STREAM:
        closed = config.num_modalities * stack_closed_form(config) + head_closed_form(config)
    else:
        closed = unimodal

    if storage is not None and storage != closed:
        raise LMAError(f"{mode.value}: stored parameters {storage} != closed form {closed}")
    return ParamReport(
        model=mode.value, total=closed, unimodal=unimodal,
        closed_form_total=closed, storage_total=storage,
    )


HISTOGRAM_FIELDS = ["tap", "source", "bin_low", "bin_high", "count", "proportion", "excluded"]
RANK_FIELDS = ["block", "average_rank", "r_init", "r_target"]
PARAM_FIELDS = ["model", "total", "unimodal", "increment", "increment_percent", "closed_form_total", "storage_total"]


def write_histogram_csv(histograms: Sequence[BiasHistogram], path: str) -> None:
    edges = BiasHistogram.bin_edges()
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTOGRAM_FIELDS)
        writer.writeheader()
        for h in histograms:
            for i, (count, proportion) in enumerate(zip(h.counts, h.proportions)):
                writer.writerow({
                    "tap": h.tap, "source": h.source.value,
                    "bin_low": f"{edges[i]:.1f}", "bin_high": f"{edges[i + 1]:.1f}",
                    "count": count, "proportion": f"{proportion:.6f}", "excluded": h.excluded,
                })


def write_rank_csv(report: RankReport, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RANK_FIELDS)
        writer.writeheader()
        for block, average in zip(report.blocks, report.averages):
            writer.writerow({
                "block": block, "average_rank": f"{average:.6f}",
                "r_init": report.r_init, "r_target": report.r_target,
            })


def write_param_csv(reports: Sequence[ParamReport], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PARAM_FIELDS)
        writer.writeheader()
        for r in reports:
            writer.writerow({
                "model": r.model, "total": r.total, "unimodal": r.unimodal,
                "increment": r.increment, "increment_percent": f"{r.increment_percent:.4f}",
                "closed_form_total": r.closed_form_total,
                "storage_total": "" if r.storage_total is None else r.storage_total,
            })
