"""Self-supervised pretraining with a momentum key encoder and negative queues."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augment import compose
from .checkpoint import bytes_to_tensor, read_checkpoint, tensor_to_bytes, write_checkpoint
from .config import RunConfig, config_from_dict
from .contrastive import (
    LossTerms, NegativeQueue, ProjectionHeads, Views, cross_domain_loss, momentum_update,
)
from .encoder import DecouplingEncoder
from .errors import CheckpointError, TrainingDivergence
from .formats import SkeletonDataset
from .graph import get_graph
from .skeleton import frame_indices

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "loss", "loss_gs", "loss_gt", "loss_sg", "loss_tg", "lr")
DOMAINS = ("s", "t", "g")

# Stream tags mixed into seed sequences so the derived RNGs never collide.
_SHUFFLE, _SAMPLE, _INIT, _QUEUE, _BN = 1, 2, 3, 4, 5


class ContrastiveModel(nn.Module):
    """Query encoder and heads (trained), key copies (momentum), and three negative queues."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.encoder = DecouplingEncoder(config.encoder)
        self.heads = ProjectionHeads(config.encoder.model_dim, config.contrast.dim)
        self.key_encoder = copy.deepcopy(self.encoder)
        self.key_heads = copy.deepcopy(self.heads)
        for p in self.key_parameters():
            p.requires_grad_(False)
        self.queues = {d: NegativeQueue(config.contrast.queue_size, config.contrast.dim) for d in DOMAINS}

    def query_parameters(self) -> list[torch.Tensor]:
        return [*self.encoder.parameters(), *self.heads.parameters()]

    def key_parameters(self) -> list[torch.Tensor]:
        return [*self.key_encoder.parameters(), *self.key_heads.parameters()]

    def query(self, x: torch.Tensor, groups: int = 1) -> Views:
        return _grouped(lambda c: self.heads(*self.encoder(c)), x, groups)

    @torch.no_grad()
    def key(self, x: torch.Tensor, groups: int = 1, perm: np.ndarray | None = None) -> Views:
        """Key views; with ``perm`` the batch is regrouped before batch norm and restored after."""
        if perm is None:
            return _grouped(lambda c: self.key_heads(*self.key_encoder(c)), x, groups)
        perm_t = torch.from_numpy(perm)
        out = _grouped(lambda c: self.key_heads(*self.key_encoder(c)), x[perm_t], groups)
        inverse = torch.argsort(perm_t)
        return Views(*(v[inverse] for v in out))


def _grouped(fn, x: torch.Tensor, groups: int) -> Views:
    """Run ``fn`` on ``groups`` contiguous chunks so batch-norm statistics stay per chunk.

    Chunks smaller than two samples are avoided by lowering the group count.
    """
    groups = max(1, min(groups, x.shape[0] // 2))
    if groups == 1:
        return Views(*fn(x))
    parts = [fn(c) for c in torch.tensor_split(x, groups)]
    return Views(*(torch.cat(p) for p in zip(*parts)))


def sample_rngs(seed: int, epoch: int, index: int) -> tuple[np.random.Generator, ...]:
    """Independent streams for frame sampling, query view, and key view of one sample."""
    children = np.random.SeedSequence([seed, _SAMPLE, epoch, index]).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def two_views(dataset: SkeletonDataset, indices, config: RunConfig, epoch: int,
              pipeline=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Frame-sample each clip once, then augment it twice with independent streams."""
    pipeline = pipeline or config.augment
    graph = get_graph(config.encoder.graph)
    q_views, k_views = [], []
    for i in indices:
        frame_rng, q_rng, k_rng = sample_rngs(config.seed, epoch, int(i))
        x = dataset.samples[i].values
        x = x[:, frame_indices(x.shape[1], config.frames, frame_rng)]
        q_views.append(compose(pipeline, x, q_rng, graph))
        k_views.append(compose(pipeline, x, k_rng, graph))
    return torch.from_numpy(np.stack(q_views)), torch.from_numpy(np.stack(k_views))


def _param_groups(model: ContrastiveModel, weight_decay: float):
    decay, no_decay = [], []
    for p in model.query_parameters():
        (decay if p.dim() > 1 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: float
    loss_gs: float
    loss_gt: float
    loss_sg: float
    loss_tg: float
    lr: float

    def csv_row(self) -> list[str]:
        return [str(self.epoch), str(self.step)] + [repr(v) for v in (
            self.loss, self.loss_gs, self.loss_gt, self.loss_sg, self.loss_tg, self.lr)]


class Pretrainer:
    """Owns the full training state; every random draw derives from ``config.seed``."""

    def __init__(self, config: RunConfig, dataset: SkeletonDataset, pipeline=None):
        if len(dataset) == 0:
            raise ValueError("cannot pretrain on an empty dataset")
        self.config = config
        self.dataset = dataset
        self.pipeline = pipeline or config.augment
        torch.manual_seed(int(np.random.SeedSequence([config.seed, _INIT]).generate_state(1)[0]))
        self.model = ContrastiveModel(config)
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([config.seed, _QUEUE]).generate_state(1)[0]))
        for queue in self.model.queues.values():
            queue.fill_random(gen)
        opt = config.pretrain
        self.optimizer = torch.optim.SGD(
            _param_groups(self.model, opt.weight_decay), lr=opt.lr, momentum=opt.momentum)
        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0
        self.history: list[StepRecord] = []

    def batches(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.config.seed, _SHUFFLE, epoch])
        order = rng.permutation(len(self.dataset))
        bs = self.config.pretrain.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]

    def _set_lr(self, lr: float):
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def train_step(self, indices) -> StepRecord:
        cfg = self.config
        lr = cfg.pretrain.lr_at(self.epoch)
        self._set_lr(lr)
        xq, xk = two_views(self.dataset, indices, cfg, self.epoch, self.pipeline)
        self.model.train()
        groups = cfg.contrast.bn_groups
        perm = None
        if groups > 1:
            perm = np.random.default_rng([cfg.seed, _BN, self.epoch, self.step_in_epoch]).permutation(len(indices))
        q = self.model.query(xq, groups)
        k = self.model.key(xk, groups, perm)
        terms: LossTerms = cross_domain_loss(
            q, k, self.model.queues, cfg.contrast.weights, cfg.contrast.tau)
        if not torch.isfinite(terms.total):
            raise TrainingDivergence(
                f"non-finite loss at epoch {self.epoch} step {self.global_step}",
                [int(i) for i in indices])
        self.optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        self.optimizer.step()
        momentum_update(self.model.query_parameters(), self.model.key_parameters(),
                        cfg.contrast.momentum)
        for d, key in zip(DOMAINS, k):
            self.model.queues[d].enqueue(key)
        rec = StepRecord(self.epoch, self.global_step, *(t.item() for t in terms), lr)
        self.history.append(rec)
        self.global_step += 1
        self.step_in_epoch += 1
        return rec

    def run(self, epochs: int | None = None, run_dir=None, max_steps: int | None = None) -> None:
        """Train until ``epochs`` (default: the configured count) or ``max_steps`` more steps.

        With ``run_dir`` set, metrics are appended to ``metrics.csv`` and
        checkpoints are written every ``checkpoint_every`` epochs and at the end.
        """
        total = self.config.pretrain.epochs if epochs is None else epochs
        run_dir = Path(run_dir) if run_dir is not None else None
        writer = None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            metrics = run_dir / "metrics.csv"
            fresh = not metrics.exists() or self.global_step == 0
            fh = open(metrics, "w" if fresh else "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(METRICS_HEADER)
        steps_done = 0
        try:
            while self.epoch < total:
                batches = self.batches(self.epoch)
                while self.step_in_epoch < len(batches):
                    if max_steps is not None and steps_done >= max_steps:
                        return
                    rec = self.train_step(batches[self.step_in_epoch])
                    steps_done += 1
                    if writer is not None:
                        writer.writerow(rec.csv_row())
                log.info("epoch %d mean loss %.4f", self.epoch, self.epoch_losses()[-1])
                self.epoch += 1
                self.step_in_epoch = 0
                if run_dir is not None and (self.epoch % self.config.checkpoint_every == 0 or self.epoch == total):
                    fh.flush()
                    self.save(run_dir / f"checkpoint_epoch{self.epoch:04d}.ckpt")
            if run_dir is not None:
                self.save(run_dir / "checkpoint_final.ckpt")
        finally:
            if writer is not None:
                fh.close()

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for rec in self.history:
            by_epoch.setdefault(rec.epoch, []).append(rec.loss)
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]

    # -- checkpointing -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        config_json = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        out["meta.config"] = bytes_to_tensor(config_json)
        out["meta.progress"] = np.array([self.epoch, self.step_in_epoch, self.global_step], dtype=np.float32)
        for prefix, module in (("query", self.model.encoder), ("query_heads", self.model.heads),
                               ("key", self.model.key_encoder), ("key_heads", self.model.key_heads)):
            for name, t in module.state_dict().items():
                out[f"{prefix}.{name}"] = t.detach().cpu().numpy().astype(np.float32)
        for d, queue in self.model.queues.items():
            out[f"queue.{d}.storage"] = queue.storage.numpy().copy()
            out[f"queue.{d}.state"] = np.array([queue.cursor, queue.size], dtype=np.float32)
        for i, p in enumerate(self.model.query_parameters()):
            buf = self.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                out[f"optim.{i}.momentum_buffer"] = buf.numpy().copy()
        return out

    def save(self, path) -> None:
        write_checkpoint(path, self.config.config_hash(), self.state_tensors())

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        """Replace all training state; validates everything before mutating anything."""
        states = {}
        for prefix, module in (("query", self.model.encoder), ("query_heads", self.model.heads),
                               ("key", self.model.key_encoder), ("key_heads", self.model.key_heads)):
            current = module.state_dict()
            new = {}
            for name, t in current.items():
                key = f"{prefix}.{name}"
                if key not in tensors or tuple(tensors[key].shape) != tuple(t.shape):
                    raise CheckpointError(f"missing or mis-shaped record {key!r}")
                new[name] = torch.from_numpy(tensors[key].copy()).to(t.dtype)
            states[prefix] = (module, new)
        for d, queue in self.model.queues.items():
            if tuple(tensors.get(f"queue.{d}.storage", np.empty(0)).shape) != tuple(queue.storage.shape):
                raise CheckpointError(f"missing or mis-shaped queue {d!r}")
        params = self.model.query_parameters()
        buffers = {}
        for i, p in enumerate(params):
            arr = tensors.get(f"optim.{i}.momentum_buffer")
            if arr is not None:
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(f"mis-shaped optimizer buffer {i}")
                buffers[p] = torch.from_numpy(arr.copy())

        for module, new in states.values():
            module.load_state_dict(new)
        for d, queue in self.model.queues.items():
            queue.storage.copy_(torch.from_numpy(tensors[f"queue.{d}.storage"]))
            cursor, size = tensors[f"queue.{d}.state"]
            queue.cursor, queue.size = int(cursor), int(size)
        self.optimizer.state.clear()
        for p, buf in buffers.items():
            self.optimizer.state[p]["momentum_buffer"] = buf
        self.epoch, self.step_in_epoch, self.global_step = (int(v) for v in tensors["meta.progress"])

    @classmethod
    def from_checkpoint(cls, path, dataset: SkeletonDataset, expected_hash: bytes | None = None,
                        pipeline=None) -> "Pretrainer":
        config, tensors = load_checkpoint(path, expected_hash)
        trainer = cls(config, dataset, pipeline)
        trainer.load_state(tensors)
        return trainer


def load_checkpoint(path, expected_hash: bytes | None = None) -> tuple[RunConfig, dict[str, np.ndarray]]:
    """Read a checkpoint and the run config embedded in it."""
    config_hash, tensors = read_checkpoint(path, expected_hash)
    if "meta.config" not in tensors or "meta.progress" not in tensors:
        raise CheckpointError("checkpoint lacks metadata records")
    config = config_from_dict(json.loads(tensor_to_bytes(tensors["meta.config"])))
    if config.config_hash() != config_hash:
        raise CheckpointError("embedded config does not match the header hash")
    return config, tensors


def load_encoder(path) -> tuple[RunConfig, DecouplingEncoder]:
    """The trained query encoder from a checkpoint, in eval mode."""
    config, tensors = load_checkpoint(path)
    encoder = DecouplingEncoder(config.encoder)
    state = {}
    for name, t in encoder.state_dict().items():
        arr = tensors.get(f"query.{name}")
        if arr is None or tuple(arr.shape) != tuple(t.shape):
            raise CheckpointError(f"missing or mis-shaped record 'query.{name}'")
        state[name] = torch.from_numpy(arr.copy()).to(t.dtype)
    encoder.load_state_dict(state)
    return config, encoder.eval()


def pretrain(config: RunConfig, dataset: SkeletonDataset, run_dir=None, pipeline=None) -> Pretrainer:
    trainer = Pretrainer(config, dataset, pipeline)
    trainer.run(run_dir=run_dir)
    return trainer

