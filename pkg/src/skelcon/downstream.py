"""Downstream protocols on a pretrained query encoder.

* linear probe: an affine classifier on frozen embeddings
* retrieval: cosine nearest-neighbour label transfer
* fine-tuning: the whole encoder plus a classifier, on a labelled fraction
  (semi-supervised) or on another dataset (transfer)

Accuracies are fractions in ``[0, 1]``.
"""
from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .augment import AugmentPipeline, compose
from .config import OptimizerConfig, RunConfig
from .encoder import DecouplingEncoder
from .errors import ConfigError, TrainingDivergence
from .formats import SkeletonDataset
from .graph import get_graph
from .skeleton import frame_indices
from .training import load_encoder

REPRESENTATIONS = ("spatial", "temporal", "concat")
TASKS = ("probe", "retrieval", "semi", "transfer")

# Seed-sequence tags for downstream streams; disjoint from the pretraining tags.
_EVAL, _PROBE, _SUBSET, _FT_INIT, _FT_SHUFFLE, _FT_SAMPLE, _OCCLUDE = 11, 12, 13, 14, 15, 16, 17


@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray
    split: str = "all"

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ConfigError(f"embeddings must be a non-empty [N, D] matrix, got {vectors.shape}")
        if labels.shape != (vectors.shape[0],):
            raise ConfigError(f"{labels.shape[0]} labels for {vectors.shape[0]} embeddings")
        if not np.isfinite(vectors).all():
            raise ConfigError("embeddings contain NaN or infinity")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class Accuracy:
    top1: float
    top5: float


def _check_compatible(encoder: DecouplingEncoder, dataset: SkeletonDataset) -> None:
    cfg = encoder.cfg
    C, _, V, _ = dataset.samples[0].shape
    if (C, V) != (cfg.in_channels, cfg.num_joints):
        raise ConfigError(f"dataset has C={C}, V={V} but the encoder expects "
                          f"C={cfg.in_channels}, V={cfg.num_joints}", "dataset")


def eval_clips(dataset: SkeletonDataset, frames: int, seed: int = 0,
               corrupt: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None) -> np.ndarray:
    """Fixed-seed frame sampling of every sample, stacked to ``[N, C, frames, V, M]``.

    ``corrupt`` (optional) is applied per clip with its own seeded stream.
    """
    clips = []
    for i, seq in enumerate(dataset.samples):
        x = seq.values[:, frame_indices(seq.num_frames, frames, np.random.default_rng([seed, _EVAL, i]))]
        if corrupt is not None:
            x = corrupt(x, np.random.default_rng([seed, _OCCLUDE, i]))
        clips.append(x)
    return np.stack(clips)


def _encode(encoder: DecouplingEncoder, clips: np.ndarray, rep: str, batch_size: int) -> np.ndarray:
    was_training = encoder.training
    encoder.eval()
    out = []
    try:
        with torch.no_grad():
            for b in range(0, len(clips), batch_size):
                z_s, z_t = encoder(torch.from_numpy(clips[b:b + batch_size]))
                out.append({"spatial": z_s, "temporal": z_t,
                            "concat": torch.cat([z_t, z_s], dim=1)}[rep].numpy())
    finally:
        encoder.train(was_training)
    return np.concatenate(out)


def recalibrate_bn(encoder: DecouplingEncoder, dataset: SkeletonDataset, seed: int = 0,
                   batch_size: int = 256) -> DecouplingEncoder:
    """Copy of ``encoder`` whose batch-norm statistics are re-estimated on clean clips.

    Pretraining only ever shows the encoder masked and augmented views, so its
    running statistics do not describe unaugmented inputs. Only buffers change;
    the weights stay frozen.
    """
    _check_compatible(encoder, dataset)
    enc = copy.deepcopy(encoder)
    norms = [m for m in enc.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average over the pass
    clips = eval_clips(dataset, enc.cfg.num_frames, seed)
    enc.train()
    with torch.no_grad():
        for b in range(0, len(clips), batch_size):
            if len(clips[b:b + batch_size]) > 1:
                enc(torch.from_numpy(clips[b:b + batch_size]))
    for m, momentum in zip(norms, saved):
        m.momentum = momentum
    return enc.eval()


def extract_embeddings(source, dataset: SkeletonDataset, rep: str = "concat", seed: int = 0,
                       batch_size: int = 256, corrupt=None, split: str | None = None,
                       calibration: SkeletonDataset | None = None) -> EmbeddingSet:
    """Embed every sample with the frozen encoder (``source``: encoder or checkpoint path).

    ``concat`` is ``[z_t, z_s]``. With ``calibration`` set, batch-norm
    statistics are first re-estimated on that dataset (see ``recalibrate_bn``);
    pass the training split so train and test share one normalisation. Output
    is deterministic for a fixed ``seed``.
    """
    if rep not in REPRESENTATIONS:
        raise ConfigError(f"unknown representation {rep!r}; choose from {REPRESENTATIONS}", "rep")
    encoder = source if isinstance(source, DecouplingEncoder) else load_encoder(source)[1]
    _check_compatible(encoder, dataset)
    if calibration is not None:
        encoder = recalibrate_bn(encoder, calibration, seed, batch_size)
    clips = eval_clips(dataset, encoder.cfg.num_frames, seed, corrupt)
    vectors = _encode(encoder, clips, rep, batch_size)
    return EmbeddingSet(vectors, dataset.labels, split or dataset.name)


def _topk(logits: np.ndarray, labels: np.ndarray) -> Accuracy:
    k = min(5, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hit = top == labels[:, None]
    return Accuracy(float(hit[:, 0].mean()), float(hit.any(axis=1).mean()))


def _class_count(train_labels: np.ndarray, test_labels: np.ndarray, num_classes: int | None) -> int:
    n = int(train_labels.max()) + 1 if num_classes is None else num_classes
    if train_labels.min() < 0 or test_labels.min() < 0:
        raise ConfigError("labels must be non-negative")
    if int(train_labels.max()) >= n or int(test_labels.max()) >= n:
        raise ConfigError(f"class count mismatch: labels exceed {n} classes")
    return n


def linear_probe(train: EmbeddingSet, test: EmbeddingSet, cfg: OptimizerConfig,
                 seed: int = 0, num_classes: int | None = None) -> Accuracy:
    """Fit one affine layer with SGD on frozen embeddings and score the test set.

    Inputs are standardised with training statistics first; composed with the
    layer this is still a single affine map.
    """
    if train.dim != test.dim:
        raise ConfigError(f"embedding widths differ: {train.dim} vs {test.dim}")
    n_cls = _class_count(train.labels, test.labels, num_classes)
    mean = train.vectors.mean(axis=0)
    std = train.vectors.std(axis=0) + 1e-6
    xtr = torch.from_numpy((train.vectors - mean) / std).double()
    xte = torch.from_numpy((test.vectors - mean) / std).double()
    ytr = torch.from_numpy(train.labels)

    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, _PROBE]).generate_state(1)[0]))
    layer = nn.Linear(train.dim, n_cls).double()
    with torch.no_grad():
        layer.weight.normal_(0, 0.01, generator=gen)
        layer.bias.zero_()
    opt = torch.optim.SGD(layer.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = cfg.lr_at(epoch)
        order = torch.randperm(len(train), generator=gen)
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            loss = F.cross_entropy(layer(xtr[idx]), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        logits = layer(xte).numpy()
    if not np.isfinite(logits).all():
        raise ConfigError("probe diverged; lower probe.lr", "probe.lr")
    return _topk(logits, test.labels)


def knn_retrieval(train: EmbeddingSet, test: EmbeddingSet, k: int = 1,
                  exclude_self: bool = False) -> float:
    """Fraction of test samples whose ``k`` nearest training samples vote for the right label.

    Similarity is cosine. Votes are tallied per label; ties go to the label of
    the nearer neighbour. ``exclude_self`` (test and train the same set) gives
    leave-one-out accuracy.
    """
    return _neighbours(train, test, exclude_self, k)[0]


def _neighbours(train: EmbeddingSet, test: EmbeddingSet, exclude_self: bool, k: int):
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("retrieval needs non-empty train and test sets")
    if k < 1:
        raise ConfigError("k must be >= 1")
    a = train.vectors.astype(np.float64)
    b = test.vectors.astype(np.float64)
    a /= np.linalg.norm(a, axis=1, keepdims=True) + 1e-12
    b /= np.linalg.norm(b, axis=1, keepdims=True) + 1e-12
    sim = b @ a.T
    if exclude_self:
        if len(train) != len(test):
            raise ConfigError("exclude_self needs the test set to be the train set")
        np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")
    near = train.labels[order[:, :max(k, 5)]]
    votes = []
    for row in near[:, :k]:
        labels, first, counts = np.unique(row, return_index=True, return_counts=True)
        best = np.lexsort((first, -counts))[0]
        votes.append(labels[best])
    top1 = float((np.array(votes) == test.labels).mean())
    top5 = float((near[:, :5] == test.labels[:, None]).any(axis=1).mean())
    return top1, top5


def retrieval_accuracy(train: EmbeddingSet, test: EmbeddingSet) -> Accuracy:
    """1-NN accuracy plus the rate at which any of the 5 nearest shares the label."""
    return Accuracy(*_neighbours(train, test, False, 1))


def export_embeddings(embeddings: EmbeddingSet, path) -> None:
    """CSV with header ``label,dim0,...``; values at 9 significant digits."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", *(f"dim{i}" for i in range(embeddings.dim))])
        for label, row in zip(embeddings.labels, embeddings.vectors):
            writer.writerow([int(label), *(format(float(v), ".9g") for v in row)])


def load_embeddings(path, split: str = "all") -> EmbeddingSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise ConfigError(f"{path}: not an embedding CSV")
    body = np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))
    return EmbeddingSet(body[:, 1:].astype(np.float32), body[:, 0].astype(np.int64), split)


# -- fine-tuning ---------------------------------------------------------------


class Classifier(nn.Module):
    """Encoder plus an affine head on ``[z_t, z_s]``."""

    def __init__(self, encoder: DecouplingEncoder, num_classes: int):
        super().__init__()
        self.encoder = encoder
        self.fc = nn.Linear(2 * encoder.out_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z_s, z_t = self.encoder(x)
        return self.fc(torch.cat([z_t, z_s], dim=1))


def stratified_subset(labels: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Seeded per-class sample of ``fraction`` of each class (at least one each), sorted.

    Per-class counts are ``max(1, round(fraction * n_c))``, so they never
    differ from exact proportionality by a full sample.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"must lie in (0, 1], got {fraction}", "semi_fraction")
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, _SUBSET])
    chosen = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n = max(1, int(round(fraction * len(members))))
        chosen.append(rng.permutation(members)[:n])
    return np.sort(np.concatenate(chosen))


@dataclass
class FinetuneResult:
    top1: float
    top5: float
    model: Classifier = field(repr=False)
    train_size: int = 0


def finetune(encoder: DecouplingEncoder | str | Path | None, train: SkeletonDataset,
             test: SkeletonDataset, config: RunConfig, fraction: float = 1.0, seed: int | None = None,
             augment: AugmentPipeline | None = None) -> FinetuneResult:
    """Train every parameter of ``encoder`` plus a new classifier on labelled data.

    ``encoder`` may be a module (copied, never modified), a checkpoint path, or
    ``None`` for a from-scratch model of the same architecture. ``fraction``
    selects a stratified labelled subset of ``train``.
    """
    seed = config.seed if seed is None else seed
    subset = stratified_subset(train.labels, fraction, seed)
    train = train.subset(subset)
    n_cls = _class_count(train.labels, test.labels, max(train.num_classes, test.num_classes))

    torch.manual_seed(int(np.random.SeedSequence([seed, _FT_INIT]).generate_state(1)[0]))
    if encoder is None:
        enc = DecouplingEncoder(config.encoder)
    elif isinstance(encoder, DecouplingEncoder):
        enc = DecouplingEncoder(encoder.cfg)
        enc.load_state_dict(encoder.state_dict())
    else:
        enc = load_encoder(encoder)[1]
    _check_compatible(enc, train)
    _check_compatible(enc, test)
    model = Classifier(enc, n_cls)
    model.train()

    opt_cfg = config.finetune
    decay = [p for p in model.parameters() if p.dim() > 1]
    no_decay = [p for p in model.parameters() if p.dim() <= 1]
    opt = torch.optim.SGD([{"params": decay, "weight_decay": opt_cfg.weight_decay},
                           {"params": no_decay, "weight_decay": 0.0}],
                          lr=opt_cfg.lr, momentum=opt_cfg.momentum)
    graph = get_graph(enc.cfg.graph)
    frames = enc.cfg.num_frames
    labels = torch.from_numpy(train.labels)
    for epoch in range(opt_cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = opt_cfg.lr_at(epoch)
        order = np.random.default_rng([seed, _FT_SHUFFLE, epoch]).permutation(len(train))
        for b in range(0, len(order), opt_cfg.batch_size):
            idx = order[b:b + opt_cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            clips = []
            for i in idx:
                rng = np.random.default_rng([seed, _FT_SAMPLE, epoch, int(i)])
                seq = train.samples[i]
                x = seq.values[:, frame_indices(seq.num_frames, frames, rng)]
                clips.append(compose(augment, x, rng, graph) if augment is not None else x)
            loss = F.cross_entropy(model(torch.from_numpy(np.stack(clips))), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite fine-tuning loss at epoch {epoch}; lower finetune.lr",
                                         [int(i) for i in subset[idx]])
            opt.zero_grad()
            loss.backward()
            opt.step()

    model.eval()
    clips = eval_clips(test, frames, seed)
    with torch.no_grad():
        logits = torch.cat([model(torch.from_numpy(clips[b:b + 256]))
                            for b in range(0, len(clips), 256)]).numpy()
    acc = _topk(logits, test.labels)
    return FinetuneResult(acc.top1, acc.top5, model, len(train))


# -- task runner ---------------------------------------------------------------


def evaluate(task: str, checkpoint, config: RunConfig, seed: int | None = None) -> dict:
    """Run one protocol against a checkpoint; returns the results record.

    The dataset, split and optimiser settings come from ``config``.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {TASKS}", "task")
    seed = config.seed if seed is None else seed
    ckpt_config, encoder = load_encoder(checkpoint)
    if task == "transfer":
        if config.transfer_dataset is None:
            raise ConfigError("required for task=transfer", "transfer_dataset")
        spec = config.transfer_dataset
    else:
        spec = config.dataset
    train, test = spec.load_split()
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("subject split leaves an empty train or test set", "dataset.test_subjects")
    _check_compatible(encoder, train)

    if task in ("probe", "retrieval"):
        encoder = recalibrate_bn(encoder, train, seed)
        etr = extract_embeddings(encoder, train, "concat", seed, split="train")
        ete = extract_embeddings(encoder, test, "concat", seed, split="test")
        if task == "probe":
            acc = linear_probe(etr, ete, config.probe, seed)
            protocol = "linear probe on frozen [z_t, z_s]"
        else:
            acc = retrieval_accuracy(etr, ete)
            protocol = "cosine 1-NN on frozen [z_t, z_s]"
        top1, top5 = acc.top1, acc.top5
    else:
        fraction = config.semi_fraction if task == "semi" else 1.0
        res = finetune(encoder, train, test, config, fraction, seed)
        top1, top5 = res.top1, res.top5
        protocol = (f"fine-tune on {fraction:g} of labels" if task == "semi"
                    else "fine-tune on transfer dataset")
    return {
        "task": task,
        "dataset": train.name.rsplit("/", 1)[0],
        "protocol": protocol,
        "top1": top1,
        "top5": top5,
        "config_hash": ckpt_config.config_hash().hex(),
    }


def write_results(results: dict, path) -> None:
    Path(path).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
