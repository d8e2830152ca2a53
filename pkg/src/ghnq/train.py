"""Training loops, evaluation metrics and the layerwise range analyzer.

Covers three kinds of run: plain SGD training of zoo networks, float
finetuning of the hypernetwork over sampled graphs, and quantization-aware
finetuning of the hypernetwork where every predicted network runs with
simulated (or noise) quantization before the loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .data import Dataset, DataError, batch_stream
from .ghn import GhnModel, predict_all
from .graphs import ArchGraph, instantiate
from .network import NetworkInstance, folded_weights, forward
from .quant import BitConfig, ObserverConfig, RangeObserver, compute_quant_params


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer and learning-rate schedule.

    Milestones are fractions of the total number of steps, so the same
    schedule shape applies to any run length.
    """

    epochs: int = 30
    batch_size: int = 128
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    milestones: tuple = (0.375, 0.6, 0.85)
    gamma: float = 0.1
    meta_batch: int = 1
    divergence_factor: float = 10.0
    divergence_patience: int = 3
    steps_per_epoch: Optional[int] = None
    max_steps: Optional[int] = None
    grad_clip: Optional[float] = None

    def __post_init__(self):
        m = tuple(self.milestones)
        if any(b <= a for a, b in zip(m, m[1:])):
            raise TrainError(f"milestones must be strictly increasing, got {m}")
        if any(not 0.0 < f < 1.0 for f in m):
            raise TrainError(f"milestones are fractions of training in (0, 1), got {m}")
        if self.meta_batch < 1:
            raise TrainError("meta-batch must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch size must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise TrainError(f"grad_clip must be positive, got {self.grad_clip}")

    def lr_at(self, progress: float) -> float:
        """Learning rate after ``progress`` (0..1) of training."""
        return self.lr * self.gamma ** sum(progress >= f for f in self.milestones)

    def total_steps(self, steps_per_epoch: int) -> int:
        total = self.epochs * (self.steps_per_epoch or steps_per_epoch)
        return min(total, self.max_steps) if self.max_steps else total

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def cnn_default(cls, **kw) -> "TrainSchedule":
        return cls(**kw)

    @classmethod
    def ghn_default(cls, **kw) -> "TrainSchedule":
        base = dict(epochs=10, batch_size=32, optimizer="adam", lr=1e-3, weight_decay=1e-5,
                    milestones=(0.75,), meta_batch=4, grad_clip=5.0)
        base.update(kw)
        return cls(**base)


class DivergenceGuard:
    """Flags a run once the loss is non-finite or above ``factor`` times the
    first loss for ``patience`` consecutive steps."""

    def __init__(self, factor: float = 10.0, patience: int = 3):
        self.factor = factor
        self.patience = patience
        self.initial: Optional[float] = None
        self.bad = 0

    def update(self, loss: float) -> bool:
        if self.initial is None and math.isfinite(loss):
            self.initial = loss
        limit = self.factor * self.initial if self.initial is not None else math.inf
        if not math.isfinite(loss) or loss > limit:
            self.bad += 1
        else:
            self.bad = 0
        return self.diverged

    @property
    def diverged(self) -> bool:
        return self.bad >= self.patience


@dataclass
class TrainResult:
    status: str = "ok"
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    steps: int = 0
    train_acc: Optional[float] = None

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def smoothed(self, window: int = 20) -> np.ndarray:
        return smooth(self.losses, window)


def smooth(values: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def _make_optimizer(params: list, sched: TrainSchedule):
    if sched.optimizer == "sgd":
        return ad.SGDMomentum(params, lr=sched.lr, momentum=sched.momentum, weight_decay=sched.weight_decay)
    return ad.Adam(params, lr=sched.lr, betas=tuple(sched.betas), weight_decay=sched.weight_decay)


def _set_lr(opt, lr: float) -> None:
    opt.lr = lr


# ---------------------------------------------------------------------------
# CNN training
# ---------------------------------------------------------------------------


def train_cnn(
    net: NetworkInstance,
    data: Dataset,
    sched: TrainSchedule = TrainSchedule(),
    generator: Optional[torch.Generator] = None,
) -> TrainResult:
    """Train ``net`` in place with minibatch SGD and cross-entropy loss.

    A diverging run stops early with ``status='diverged'``; the parameters
    are left as they were at the last finite step.
    """
    if len(data) == 0:
        raise DataError("training data is empty")
    generator = generator or torch.Generator().manual_seed(0)
    opt = _make_optimizer(net.parameters(), sched)
    guard = DivergenceGuard(sched.divergence_factor, sched.divergence_patience)
    per_epoch = max(1, len(data) // sched.batch_size)
    total = sched.total_steps(per_epoch)
    stream = batch_stream(data, sched.batch_size, generator)
    result = TrainResult()
    correct = seen = 0
    for step in range(total):
        x, y = next(stream)
        lr = sched.lr_at(step / total)
        _set_lr(opt, lr)
        logits = forward(net, x, train=True, generator=generator)
        loss = ad.softmax_cross_entropy(logits, y)
        value = float(loss.detach())
        result.losses.append(value)
        result.lrs.append(lr)
        result.steps = step + 1
        if guard.update(value):
            result.status = "diverged"
            break
        if not math.isfinite(value):
            continue
        ad.zero_grad(opt.params)
        ad.backward(loss)
        opt.step()
        if step >= total - per_epoch:
            correct += int((logits.detach().argmax(1) == y).sum())
            seen += len(y)
    if seen:
        result.train_acc = correct / seen
    finite = all(ad.is_finite(p) for p in net.parameters())
    if result.status == "ok" and not (finite and math.isfinite(result.losses[-1])):
        result.status = "diverged"
    return result


# ---------------------------------------------------------------------------
# Calibration and evaluation
# ---------------------------------------------------------------------------


def _run_observers(net, images, names, cfg, batch_size):
    observers = {n: RangeObserver(cfg) for n in names}

    def hook(name, t):
        if name in observers:
            observers[name].update(t.to(torch.float32))

    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            forward(net, images[i:i + batch_size], observe=hook)
    return {n: obs.compute() for n, obs in observers.items()}


def calibrate_activations(
    net: NetworkInstance,
    data: Dataset,
    cfg: ObserverConfig = ObserverConfig("percentile"),
    generator: Optional[torch.Generator] = None,
    batch_size: int = 256,
    max_elements: int = 64_000_000,
) -> NetworkInstance:
    """Set a clipping range for every quantized activation of ``net``.

    Ranges come from a random sample of ``cfg.sample_size`` training images
    run through the float network. Percentile ranges are exact order
    statistics; to bound memory the layers are processed in groups whose
    stored activations stay under ``max_elements`` values.
    """
    if len(data) == 0:
        raise DataError("calibration data is empty")
    generator = generator or torch.Generator().manual_seed(0)
    images = data.sample(cfg.sample_size, generator).images
    names = [layer.name for layer in net.act_layers()]
    if cfg.mode == "absolute":
        ranges = _run_observers(net, images, names, cfg, batch_size)
    else:
        sizes = {}

        def probe(name, t):
            sizes[name] = t[0].numel() * len(images)

        with torch.no_grad():
            forward(net, images[:1], observe=probe)
        ranges, group, used = {}, [], 0
        for n in names:
            if group and used + sizes[n] > max_elements:
                ranges.update(_run_observers(net, images, group, cfg, batch_size))
                group, used = [], 0
            group.append(n)
            used += sizes[n]
        if group:
            ranges.update(_run_observers(net, images, group, cfg, batch_size))
    net.act_ranges = ranges
    return net


def topk_correct(logits: torch.Tensor, labels: torch.Tensor, k: int) -> int:
    k = min(k, logits.shape[1])
    top = logits.topk(k, dim=1).indices
    return int((top == labels.unsqueeze(1)).any(dim=1).sum())


def qmse(fp_logits: torch.Tensor, q_logits: torch.Tensor) -> float:
    return float(torch.mean((fp_logits.double() - q_logits.double()) ** 2))


def qce(fp_logits: torch.Tensor, q_logits: torch.Tensor) -> float:
    """Mean of ``-sum softmax(fp) * log softmax(q)`` over samples."""
    p = torch.softmax(fp_logits.double(), dim=1)
    logq = torch.log_softmax(q_logits.double(), dim=1)
    return float(torch.mean(-(p * logq).sum(dim=1)))


def entropy(logits: torch.Tensor) -> float:
    return qce(logits, logits)


def percent_decrease(acc_fp: float, acc_q: float) -> float:
    """Relative accuracy drop in percent; 0 when both accuracies are 0."""
    if acc_fp == 0:
        return 0.0 if acc_q == 0 else -math.inf
    return (acc_fp - acc_q) / acc_fp * 100.0


@dataclass
class EvalRow:
    network: str
    bits: str
    fp32_top1: float
    fp32_top5: float
    q_top1: Optional[float] = None
    q_top5: Optional[float] = None
    qmse: Optional[float] = None
    qce: Optional[float] = None
    percent_decrease: Optional[float] = None
    status: str = "ok"


def evaluate(
    net: NetworkInstance,
    data: Dataset,
    bits: Optional[BitConfig] = None,
    batch_size: int = 256,
    generator: Optional[torch.Generator] = None,
) -> EvalRow:
    """Float accuracy and, when ``bits`` is given, quantized accuracy plus
    QMSE/QCE between the float and dequantized logits. Accuracies are in %."""
    n = len(data)
    if n == 0:
        raise DataError("evaluation data is empty")
    generator = generator or torch.Generator().manual_seed(0)
    f1 = f5 = q1 = q5 = 0
    se = ce = 0.0
    with torch.no_grad():
        for x, y in data.batches(batch_size, shuffle=False):
            fp = forward(net, x)
            f1 += topk_correct(fp, y, 1)
            f5 += topk_correct(fp, y, 5)
            if bits is not None:
                q = forward(net, x, mode=bits, generator=generator)
                q1 += topk_correct(q, y, 1)
                q5 += topk_correct(q, y, 5)
                se += qmse(fp, q) * len(y)
                ce += qce(fp, q) * len(y)
    row = EvalRow(net.name, "Float32" if bits is None else bits.name, 100 * f1 / n, 100 * f5 / n)
    if bits is not None:
        row.q_top1, row.q_top5 = 100 * q1 / n, 100 * q5 / n
        row.qmse, row.qce = se / n, ce / n
        row.percent_decrease = percent_decrease(row.fp32_top1, row.q_top1)
    return row


# ---------------------------------------------------------------------------
# Layerwise analysis
# ---------------------------------------------------------------------------


@dataclass
class LayerwiseRecord:
    index: int
    name: str
    weight_min: float
    weight_max: float
    weight_step: float
    act_min: Optional[float] = None
    act_max: Optional[float] = None
    act_step: Optional[float] = None
    bits: int = 8

    @property
    def weight_range(self) -> float:
        return self.weight_max - self.weight_min


def _consumers(net: NetworkInstance) -> list:
    out = [[] for _ in net.layers]
    for i, layer in enumerate(net.layers):
        for j in layer.inputs:
            out[j].append(i)
    return out


def _activation_after(net: NetworkInstance, consumers: list, i: int) -> Optional[str]:
    """Name of the first quantized activation fed by layer ``i``, passing
    through BN/add/identity layers."""
    frontier = list(consumers[i])
    while frontier:
        j = min(frontier)
        frontier.remove(j)
        layer = net.layers[j]
        if layer.quant_output:
            return layer.name
        if layer.kind in ("bn", "add", "identity"):
            frontier += consumers[j]
    return None


def layerwise_report(
    net: NetworkInstance,
    data: Optional[Dataset] = None,
    bits: int = 8,
    generator: Optional[torch.Generator] = None,
) -> list:
    """Per weight layer, in layer order: BN-folded weight range, range of the
    activation it feeds, and the quantization stepsize of both at ``bits``.

    Activation ranges come from ``net.act_ranges``; if the net is
    uncalibrated and ``data`` is given, absolute ranges are observed first.
    """
    if not net.act_ranges and data is not None:
        calibrate_activations(net, data, ObserverConfig("absolute", sample_size=1024), generator)
    consumers = _consumers(net)
    records = []
    for i, layer in enumerate(net.layers):
        if layer.weight is None:
            continue
        w, _ = folded_weights(layer)
        lo, hi = float(w.min()), float(w.max())
        rec = LayerwiseRecord(i, layer.name, lo, hi, compute_quant_params(lo, hi, bits).scale, bits=bits)
        act = _activation_after(net, consumers, i)
        if act is not None and act in net.act_ranges:
            a_lo, a_hi = net.act_ranges[act]
            rec.act_min, rec.act_max = a_lo, a_hi
            rec.act_step = compute_quant_params(a_lo, a_hi, bits).scale
        records.append(rec)
    return records


def write_layerwise_csv(records: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [f.name for f in LayerwiseRecord.__dataclass_fields__.values()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in cols])


def plot_layerwise(records: list, path, title: str = "") -> None:
    """Weight/activation range and stepsize against layer index, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    idx = np.arange(len(records))
    fig, (ax_w, ax_a) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for ax, lo, hi, step, label in (
        (ax_w, "weight_min", "weight_max", "weight_step", "BN-folded weights"),
        (ax_a, "act_min", "act_max", "act_step", "activations"),
    ):
        rng = [np.nan if getattr(r, hi) is None else getattr(r, hi) - getattr(r, lo) for r in records]
        st = [np.nan if getattr(r, step) is None else getattr(r, step) for r in records]
        ax.plot(idx, rng, marker="o", label="range")
        ax.set_ylabel(f"{label} range")
        twin = ax.twinx()
        twin.plot(idx, st, marker="x", color="tab:red", label="stepsize")
        twin.set_ylabel("stepsize (average precision)")
        ax.grid(alpha=0.3)
    ax_a.set_xlabel("layer index")
    ax_a.set_xticks(idx)
    ax_a.set_xticklabels([r.name for r in records], rotation=90, fontsize=6)
    fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Hypernetwork training
# ---------------------------------------------------------------------------


def graph_loss(
    g: ArchGraph,
    model: GhnModel,
    x: torch.Tensor,
    y: torch.Tensor,
    bits: Optional[BitConfig] = None,
    generator: Optional[torch.Generator] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Task loss and logits of the network the hypernetwork predicts for ``g``."""
    net = instantiate(g, predict_all(g, model), bn_mode="batch")
    logits = forward(net, x, mode=bits, generator=generator)
    return ad.softmax_cross_entropy(logits, y), logits


def _ghn_train(model, graphs, data, sched, bits, generator, log_fn):
    if not graphs:
        raise TrainError("no training graphs")
    if len(data) == 0:
        raise DataError("training data is empty")
    generator = generator or torch.Generator().manual_seed(0)
    opt = _make_optimizer(list(model.parameters()), sched)
    guard = DivergenceGuard(sched.divergence_factor, sched.divergence_patience)
    per_epoch = max(1, math.ceil(len(graphs) / sched.meta_batch))
    total = sched.total_steps(per_epoch)
    stream = batch_stream(data, sched.batch_size, generator)
    order: list = []
    result = TrainResult()
    model.train()
    for step in range(total):
        if len(order) < sched.meta_batch:
            order += torch.randperm(len(graphs), generator=generator).tolist()
        meta, order = order[: sched.meta_batch], order[sched.meta_batch:]
        x, y = next(stream)
        lr = sched.lr_at(step / total)
        _set_lr(opt, lr)
        losses = [graph_loss(graphs[i], model, x, y, bits, generator)[0] for i in meta]
        loss = torch.stack(losses).mean()
        value = float(loss.detach())
        result.losses.append(value)
        result.lrs.append(lr)
        result.steps = step + 1
        if log_fn is not None:
            log_fn(step, total, value)
        if guard.update(value):
            result.status = "diverged"
            break
        if not math.isfinite(value):
            continue
        opt_params = opt.params
        ad.zero_grad(opt_params)
        ad.backward(loss)
        if sched.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(opt_params, sched.grad_clip)
        opt.step()
    model.eval()
    return result


def ghn_finetune_fp32(
    model: GhnModel,
    graphs: list,
    data: Dataset,
    sched: Optional[TrainSchedule] = None,
    generator: Optional[torch.Generator] = None,
    log_fn=None,
) -> TrainResult:
    """Finetune ``model`` in place on the float task loss of predicted networks.

    Each step draws a meta-batch of graphs and one data batch shared by all of
    them; the loss is the mean over the meta-batch.
    """
    return _ghn_train(model, graphs, data, sched or TrainSchedule.ghn_default(), None, generator, log_fn)


def qat_bit_config(weight_bits: int, act_bits: int, noise: bool = False,
                   observer: ObserverConfig = ObserverConfig()) -> BitConfig:
    """Bit setting used inside QAT: fresh per-step ranges, simulated or noise quantization."""
    return BitConfig(weight_bits, act_bits, "noisequant" if noise else "simquant", observer, observer)


def ghn_qat(
    model: GhnModel,
    graphs: list,
    data: Dataset,
    bits: BitConfig,
    sched: Optional[TrainSchedule] = None,
    generator: Optional[torch.Generator] = None,
    log_fn=None,
) -> TrainResult:
    """Quantization-aware finetuning: every predicted network runs with
    BN-folded, fake-quantized weights and activations (straight-through
    gradients), or with additive uniform noise when ``bits.mode`` is
    ``'noisequant'``."""
    if bits.weight_bits is None and bits.act_bits is None:
        raise TrainError("QAT needs at least one quantized side")
    return _ghn_train(model, graphs, data, sched or TrainSchedule.ghn_default(), bits, generator, log_fn)


# ---------------------------------------------------------------------------
# Hypernetwork evaluation
# ---------------------------------------------------------------------------


def sem(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


SPLIT_COLUMNS = {"TestID": "ID", "Deep": "Deep", "Wide": "Wide", "BNFree": "BN-Free"}


@dataclass
class EvalReport:
    """Per-graph rows ``{split, graph, bits, top1, top5}`` plus aggregates."""

    rows: list = field(default_factory=list)

    def add(self, split: str, graph: int, bits: str, top1: float, top5: float) -> None:
        self.rows.append({"split": split, "graph": graph, "bits": bits, "top1": top1, "top5": top5})

    def splits(self) -> list:
        return list(dict.fromkeys(r["split"] for r in self.rows))

    def bit_settings(self) -> list:
        return list(dict.fromkeys(r["bits"] for r in self.rows))

    def values(self, split: str, bits: str, metric: str = "top1") -> list:
        return [r[metric] for r in self.rows if r["split"] == split and r["bits"] == bits]

    def aggregate(self, split: str, bits: str, metric: str = "top1") -> dict:
        v = self.values(split, bits, metric)
        if not v:
            raise KeyError(f"no rows for split {split!r} at {bits}")
        return {"mean": float(np.mean(v)), "sem": sem(v), "max": float(np.max(v)), "n": len(v)}

    def mean(self, split: str, bits: str, metric: str = "top1") -> float:
        return self.aggregate(split, bits, metric)["mean"]

    def table(self, metric: str = "top1") -> list:
        """Rows of bit settings, columns of splits, cells ``mean±sem; max``."""
        out = []
        for b in self.bit_settings():
            row = {"Bits": b}
            for s in self.splits():
                a = self.aggregate(s, b, metric)
                row[SPLIT_COLUMNS.get(s, s)] = f"{a['mean']:.1f}±{a['sem']:.1f}; {a['max']:.1f}"
            out.append(row)
        return out

    def write_rows_csv(self, path) -> None:
        _write_dicts(path, self.rows, ["split", "graph", "bits", "top1", "top5"])

    def write_table_csv(self, path, metric: str = "top1") -> None:
        cols = ["Bits"] + [SPLIT_COLUMNS.get(s, s) for s in self.splits()]
        _write_dicts(path, self.table(metric), cols)

    @classmethod
    def read_rows_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            rows = [{"split": r["split"], "graph": int(r["graph"]), "bits": r["bits"],
                     "top1": float(r["top1"]), "top5": float(r["top5"])} for r in csv.DictReader(fh)]
        return cls(rows)


def _write_dicts(path, rows: list, cols: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def eval_bit_configs(settings: Sequence[str]) -> list:
    """``None`` for Float32 plus BitConfigs with dynamic absolute ranges."""
    return [None if s.lower() in ("float32", "fp32") else BitConfig.parse(s) for s in settings]


def evaluate_ghn(
    model: GhnModel,
    splits: dict,
    bit_settings: Sequence[str],
    data: Dataset,
    batch_size: int = 64,
    max_images: Optional[int] = None,
    seed: int = 0,
    log_fn=None,
) -> EvalReport:
    """Accuracy of predicted networks per split and bit setting.

    BatchNorm uses the statistics of each 64-image test batch. Activation and
    weight ranges are taken per batch (absolute min/max) because predicted
    networks are never calibrated.
    """
    if max_images is not None:
        data = data.subset(torch.arange(min(max_images, len(data))))
    configs = eval_bit_configs(bit_settings)
    report = EvalReport()
    model.eval()
    with torch.no_grad():
        for split, graphs in splits.items():
            for gi, g in enumerate(graphs):
                net = instantiate(g, predict_all(g, model), bn_mode="batch")
                for setting, bits in zip(bit_settings, configs):
                    gen = torch.Generator().manual_seed(seed)
                    c1 = c5 = 0
                    for x, y in data.batches(batch_size, shuffle=False):
                        logits = forward(net, x, mode=bits, generator=gen)
                        c1 += topk_correct(logits, y, 1)
                        c5 += topk_correct(logits, y, 5)
                    name = "Float32" if bits is None else bits.name
                    report.add(split, gi, name, 100 * c1 / len(data), 100 * c5 / len(data))
                if log_fn is not None:
                    log_fn(split, gi, len(graphs))
    return report


STUDY_COLUMNS = [
    "Network Architecture", "FP32 Accuracy", "QUINT8 Accuracy", "QMSE", "QCE", "Percent Accuracy Decrease",
]


def study_rows(results: list) -> list:
    """Study-table rows from ``(EvalRow, status)`` pairs; diverged runs keep
    their row with empty metrics and a flag."""
    out = []
    for row in results:
        ok = row.status == "ok"
        out.append({
            "Network Architecture": row.network,
            "FP32 Accuracy": f"{row.fp32_top1:.2f}" if ok else "",
            "QUINT8 Accuracy": f"{row.q_top1:.2f}" if ok else "",
            "QMSE": f"{row.qmse:.6g}" if ok else "",
            "QCE": f"{row.qce:.6g}" if ok else "",
            "Percent Accuracy Decrease": f"{row.percent_decrease:.3f}" if ok else "",
            "Diverged": str(not ok).lower(),
        })
    return out


def write_study_csv(results: list, path) -> None:
    _write_dicts(path, study_rows(results), STUDY_COLUMNS + ["Diverged"])
