"""Cluster-classification knowledge transfer.

Pipeline: cluster the features of a pre-trained model, label every sample
with its nearest center, train a student on those pseudo-labels, then judge
the student by a linear probe on held-out true labels. Also hosts the two
controls (random-network pseudo-labels, feature-regression distillation),
the k and domain sweeps, and the NMI / purity metrics.

Datasets are manifests (see :func:`cctransfer.dataio.load_manifest`):
``features`` are the pre-trained model's features, ``inputs`` what the
student sees (defaults to ``features``), ``labels`` the ground truth used
only for evaluation.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio, kmeans, nnet
from .dataio import FeatureMatrix, LabelVector
from .rng import Rng

MODES = ("cluster_transfer", "regression_distill", "random_control")
RANDOM_CONTROL_LR = 0.001


class StageError(RuntimeError):
    """A pipeline stage failed; the message starts with the stage name."""


# ---------------------------------------------------------------- metrics

def _contingency(a, b) -> np.ndarray:
    a, b = np.asarray(a).reshape(-1), np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if ai.size else 0, bi.max() + 1 if bi.size else 0), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return -math.fsum(p * np.log(p))


def _labels(x):
    return x.labels if isinstance(x, LabelVector) else np.asarray(x)


def nmi(a, b) -> float:
    """Normalized mutual information, arithmetic-mean normalization.

    Two single-cluster partitions score 1.0.
    """
    table = _contingency(_labels(a), _labels(b))
    n = int(table.sum())
    if n == 0:
        raise ValueError("empty labelings")
    ha, hb = _entropy(table.sum(axis=1), n), _entropy(table.sum(axis=0), n)
    if ha == 0 and hb == 0:
        return 1.0
    ra, rb = np.nonzero(table)
    nij = table[ra, rb]
    outer = table.sum(axis=1)[ra] * table.sum(axis=0)[rb]
    # the two argument orders enumerate the same terms in transposed order;
    # sorting makes the sum order-free so nmi(a, b) == nmi(b, a) exactly
    terms = np.sort((nij / n) * (np.log(nij * n) - np.log(outer)))
    mi = math.fsum(terms)
    return float(min(1.0, max(0.0, mi / ((ha + hb) / 2))))


def purity(clusters, truth) -> float:
    """Fraction of samples whose cluster's majority true class is their own."""
    table = _contingency(_labels(clusters), _labels(truth))
    return float(table.max(axis=1).sum() / table.sum())


# ------------------------------------------------------------ synthetic data

@dataclass(frozen=True)
class BlobSpec:
    """Isotropic Gaussian blobs plus a student-side view that hides them.

    Teacher features: class ``c`` is centered at ``sep / sqrt(2) * e_c`` with
    unit within-class std, so every pair of centers is ``sep`` apart.
    Student inputs: the teacher coordinates with an independent random sign
    per coordinate and sample, followed by ``noise_dims`` Gaussian nuisance
    coordinates of std ``noise_std``; everything divided by the overall std.
    Class means of the inputs are all zero, so the classes are invisible to
    any linear read-out of the raw inputs.
    """

    classes: int = 10
    per_class: int = 200
    dim: int = 16
    sep: float = 10.0
    noise_dims: int = 48
    noise_std: float = 3.0


def synth_blobs(spec: BlobSpec, seed: int):
    """Returns ``(features, labels, inputs)``, samples ordered by class."""
    if spec.dim < spec.classes:
        raise ValueError(f"dim ({spec.dim}) must be >= classes ({spec.classes})")
    if spec.classes < 1 or spec.per_class < 1 or spec.sep <= 0:
        raise ValueError("classes and per_class must be >= 1 and sep > 0")
    rng = Rng(seed)
    n = spec.classes * spec.per_class
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    centers = np.zeros((spec.classes, spec.dim))
    centers[np.arange(spec.classes), np.arange(spec.classes)] = spec.sep / math.sqrt(2.0)
    feats = centers[labels] + rng.normals((n, spec.dim))
    signs = np.where(rng.uniforms((n, spec.dim)) < 0.5, -1.0, 1.0)
    view = signs * feats
    if spec.noise_dims:
        view = np.hstack([view, spec.noise_std * rng.normals((n, spec.noise_dims))])
    inputs = view / np.sqrt(np.mean(view * view))
    return FeatureMatrix(feats), LabelVector(labels, spec.classes), FeatureMatrix(inputs)


def write_blobs(spec: BlobSpec, seed: int, prefix) -> Path:
    """Write ``<prefix>.features.fve``, ``.labels.lbl``, ``.inputs.fve`` and a manifest."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    feats, labels, inputs = synth_blobs(spec, seed)
    paths = {k: prefix.parent / f"{prefix.name}.{k}" for k in ("features.fve", "labels.lbl", "inputs.fve")}
    dataio.write_features(feats, paths["features.fve"])
    dataio.write_labels(labels, paths["labels.lbl"])
    dataio.write_features(inputs, paths["inputs.fve"])
    manifest = prefix.parent / f"{prefix.name}.manifest.json"
    dataio.write_manifest(manifest, features=paths["features.fve"], labels=paths["labels.lbl"],
                          inputs=paths["inputs.fve"], name=prefix.name)
    return manifest


# -------------------------------------------------------------- datasets

@dataclass(frozen=True)
class Dataset:
    name: str
    features: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray | None = None

    @classmethod
    def from_manifest(cls, path) -> "Dataset":
        m = dataio.load_manifest(path)
        if m["features"] is None:
            raise ValueError(f"{path}: manifest has no features")
        feats = dataio.read_features(m["features"]).data
        inputs = dataio.read_features(m["inputs"]).data if m["inputs"] else feats
        labels = dataio.read_labels(m["labels"]).labels if m["labels"] else None
        if inputs.shape[0] != feats.shape[0] or (labels is not None and labels.shape[0] != feats.shape[0]):
            raise ValueError(f"{path}: features, inputs and labels disagree on sample count")
        return cls(m["name"], feats, inputs, labels)

    @classmethod
    def from_blobs(cls, spec: BlobSpec, seed: int, name: str | None = None) -> "Dataset":
        f, lab, x = synth_blobs(spec, seed)
        return cls(name or f"blobs-{seed}", f.data, x.data, lab.labels)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]


# -------------------------------------------------------------- pipeline

DEFAULT_HIDDEN = ({"type": "dense", "out": 64}, {"type": "relu"})


@dataclass(frozen=True)
class ProbeConfig:
    train_fraction: float = 0.5
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 60
    batch_size: int = 64


@dataclass(frozen=True)
class PipelineConfig:
    cluster_dataset: Dataset
    pseudo_label_dataset: Dataset
    k: int = 10
    hidden: tuple = DEFAULT_HIDDEN
    train: nnet.TrainConfig = field(default_factory=nnet.TrainConfig)
    mode: str = "cluster_transfer"
    seed: int = 0
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4
    kmeans_n_init: int = 5
    l2_normalize: bool = False
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    baselines: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "regression_distill" and self.k < 2:
            raise ValueError("k must be >= 2")
        a, b = self.cluster_dataset, self.pseudo_label_dataset
        if a.features.shape[1] != b.features.shape[1]:
            raise ValueError("cluster and pseudo-label datasets have different feature dims")

    def student_spec(self, n_out: int, head: str = "softmax_ce") -> nnet.NetSpec:
        layers = tuple(self.hidden) + ({"type": "dense", "out": n_out},)
        return nnet.NetSpec((self.pseudo_label_dataset.inputs.shape[1],), layers, head)


@dataclass
class TransferReport:
    mode: str
    k: int | None
    n_samples: int
    cluster_dataset: str
    pseudo_label_dataset: str
    inertia: float | None = None
    nmi_vs_truth: float | None = None
    purity_vs_truth: float | None = None
    student_train_acc: float | None = None
    student_train_loss: float | None = None
    student_probe_acc: float | None = None
    untrained_probe_acc: float | None = None
    supervised_probe_acc: float | None = None
    wall_times: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        d["metrics_are_proxies"] = True
        if not timings:
            d.pop("wall_times")
        return d

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=True) + "\n"


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(f"{name}: {exc}") from exc


def probe_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.array(Rng.substream(seed, 7).permutation(n))
    cut = max(1, min(n - 1, int(round(n * fraction))))
    return np.sort(order[:cut]), np.sort(order[cut:])


def linear_probe(emb: np.ndarray, labels: np.ndarray, cfg: ProbeConfig, seed: int) -> float:
    """Softmax-regression accuracy on a held-out split of frozen features."""
    labels = np.asarray(labels)
    tr, te = probe_split(len(labels), cfg.train_fraction, seed)
    mu = emb[tr].mean(axis=0)
    sd = emb[tr].std(axis=0)
    sd[sd == 0] = 1.0
    z = (emb - mu) / sd
    n_classes = int(labels.max()) + 1
    spec = nnet.NetSpec((z.shape[1],), ({"type": "dense", "out": max(2, n_classes)},))
    tcfg = nnet.TrainConfig(lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size,
                            epochs=cfg.epochs, seed=seed)
    params, _ = nnet.train(spec, tcfg, z[tr], labels[tr])
    return nnet.evaluate(spec, params, z[te], labels[te])


def _timed(times: dict, name: str, fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = _stage(name, fn, *args, **kwargs)
    times[name] = round(time.perf_counter() - t0, 6)
    return out


def run_pipeline(cfg: PipelineConfig) -> TransferReport:
    """Run one transfer experiment end to end."""
    times: dict = {}
    data = cfg.pseudo_label_dataset
    report = TransferReport(cfg.mode, None if cfg.mode == "regression_distill" else cfg.k,
                            data.n_samples, cfg.cluster_dataset.name, data.name, wall_times=times)
    student_seed = cfg.train.seed
    train_cfg = cfg.train
    if cfg.mode == "random_control":
        train_cfg = replace(train_cfg, lr=RANDOM_CONTROL_LR)

    if cfg.mode == "regression_distill":
        spec = cfg.student_spec(data.features.shape[1], head="l2")
        params, hist = _timed(times, "train_student", nnet.train, spec, train_cfg, data.inputs, data.features)
        report.student_train_loss = hist[-1]["loss"] if hist else None
    else:
        if cfg.mode == "random_control":
            # features of a randomly initialized network with the student architecture
            rand_spec = cfg.student_spec(cfg.k)
            rand_params = nnet.init_params(rand_spec, Rng.substream(cfg.seed, 3).next_u64())
            fit_feats = _timed(times, "random_features", nnet.embed, rand_spec, rand_params,
                               cfg.cluster_dataset.inputs)
            label_feats = nnet.embed(rand_spec, rand_params, data.inputs)
        else:
            fit_feats, label_feats = cfg.cluster_dataset.features, data.features
        if cfg.l2_normalize:
            fit_feats, label_feats = kmeans.l2_normalize(fit_feats), kmeans.l2_normalize(label_feats)
        kcfg = kmeans.KMeansConfig(k=cfg.k, max_iters=cfg.kmeans_max_iters, tol=cfg.kmeans_tol,
                                   seed=cfg.seed, n_init=cfg.kmeans_n_init)
        cb = _timed(times, "cluster", kmeans.lloyd_fit, fit_feats, kcfg, Rng(cfg.seed), threads=cfg.threads)
        pseudo = _timed(times, "assign", kmeans.assign, label_feats, cb, threads=cfg.threads).labels
        report.inertia = cb.inertia
        if data.labels is not None:
            report.nmi_vs_truth = nmi(pseudo, data.labels)
            report.purity_vs_truth = purity(pseudo, data.labels)
        spec = cfg.student_spec(cfg.k)
        params, hist = _timed(times, "train_student", nnet.train, spec, train_cfg, data.inputs, pseudo)
        if hist:
            report.student_train_acc = hist[-1]["accuracy"]
            report.student_train_loss = hist[-1]["loss"]

    if data.labels is None:
        return report
    probe_seed = cfg.seed
    emb = nnet.embed(spec, params, data.inputs)
    report.student_probe_acc = _timed(times, "probe", linear_probe, emb, data.labels, cfg.probe, probe_seed)
    if cfg.baselines:
        init = nnet.init_params(spec, student_seed)
        report.untrained_probe_acc = _timed(times, "probe_untrained", linear_probe,
                                            nnet.embed(spec, init, data.inputs), data.labels,
                                            cfg.probe, probe_seed)
        n_classes = int(data.labels.max()) + 1
        sup_spec = cfg.student_spec(max(2, n_classes))
        sup_params, _ = _timed(times, "train_supervised", nnet.train, sup_spec, cfg.train,
                               data.inputs, data.labels)
        report.supervised_probe_acc = _timed(times, "probe_supervised", linear_probe,
                                             nnet.embed(sup_spec, sup_params, data.inputs),
                                             data.labels, cfg.probe, probe_seed)
    return report


def sweep_k(cfg: PipelineConfig, k_list) -> list[TransferReport]:
    """One run per cluster count (baselines only computed on the first)."""
    reports = []
    for i, k in enumerate(k_list):
        reports.append(run_pipeline(replace(cfg, k=int(k), baselines=cfg.baselines and i == 0)))
    return reports


def sweep_domain(cfg: PipelineConfig, pairs) -> list[TransferReport]:
    """Cluster on the first dataset of each pair, pseudo-label the second."""
    return [run_pipeline(replace(cfg, cluster_dataset=a, pseudo_label_dataset=b, baselines=False))
            for a, b in pairs]


def _pct(x) -> str:
    return "n/a" if x is None else f"{100 * x:.1f}"


def k_table(reports) -> str:
    """Cluster-count ablation laid out with one column per k."""
    head = ["#clusters"] + [str(r.k) for r in reports]
    rows = [
        ["probe accuracy (%)"] + [_pct(r.student_probe_acc) for r in reports],
        ["NMI vs truth"] + ["n/a" if r.nmi_vs_truth is None else f"{r.nmi_vs_truth:.3f}" for r in reports],
    ]
    return _render([head] + rows)


def domain_table(reports) -> str:
    """Cluster/pseudo-label domain ablation, one column per pair."""
    rows = [
        ["clustering on"] + [r.cluster_dataset for r in reports],
        ["pseudo-labels on"] + [r.pseudo_label_dataset for r in reports],
        ["probe accuracy (%)"] + [_pct(r.student_probe_acc) for r in reports],
    ]
    return _render(rows)


def _render(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        cells = [str(r[0]).ljust(widths[0])] + [str(c).rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells))
        if j == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines)


def config_from_dict(d: dict, base_dir=".") -> PipelineConfig:
    """Build a config from JSON; dataset entries are manifest paths."""
    base = Path(base_dir)
    cl = Dataset.from_manifest(base / d["cluster_dataset"])
    pl_path = d.get("pseudo_label_dataset", d["cluster_dataset"])
    pl = cl if pl_path == d["cluster_dataset"] else Dataset.from_manifest(base / pl_path)
    kwargs = {k: d[k] for k in ("k", "mode", "seed", "kmeans_max_iters", "kmeans_tol",
                                "kmeans_n_init", "l2_normalize", "baselines", "threads") if k in d}
    if "hidden" in d:
        kwargs["hidden"] = tuple(d["hidden"])
    if "train" in d:
        kwargs["train"] = nnet.TrainConfig.from_dict(d["train"])
    if "probe" in d:
        kwargs["probe"] = ProbeConfig(**d["probe"])
    return PipelineConfig(cluster_dataset=cl, pseudo_label_dataset=pl, **kwargs)
