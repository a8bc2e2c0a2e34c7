"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 to 9 share pretrained encoders (three seeds, with and without
masking) built once per session on the desk-scale profile. Run just this
module with ``pytest tests/test_acceptance.py -v``.
"""
import statistics
import time

import numpy as np
import pytest
import torch

from oracles import FifoOracle, finite_difference_check, relative_error, softmax_ce_nce
from skelcon.augment import SpatialMaskParams, TemporalMaskParams, occlude, spatial_mask, temporal_mask
from skelcon.config import tiny_config
from skelcon.contrastive import NegativeQueue, info_nce, momentum_update
from skelcon.downstream import extract_embeddings, finetune, knn_retrieval, linear_probe, recalibrate_bn
from skelcon.encoder import DecouplingEncoder, EncoderConfig
from skelcon.graph import get_graph, power_adjacency
from skelcon.training import Pretrainer

SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


# -- 1. InfoNCE against an independent softmax cross-entropy -------------------


def test_criterion_01_infonce_oracle(report):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        D = int(rng.integers(2, 33))
        K = int(rng.integers(0, 65))
        tau = float(rng.uniform(0.05, 1.0))
        u, v, negs = (rng.normal(size=s) for s in ((D,), (D,), (K, D)))
        u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
        negs /= np.linalg.norm(negs, axis=1, keepdims=True) + 1e-12
        got = info_nce(torch.from_numpy(u), torch.from_numpy(v),
                       torch.from_numpy(negs) if K else None, tau).item()
        worst = max(worst, abs(got - softmax_ce_nce(u, v, negs if K else None, tau)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 10
    assert report(1, ok, f"max |diff| {worst:.2e} over 1000 instances in {elapsed:.1f}s")


# -- 2. finite-difference gradients on a tiny encoder -------------------------


def test_criterion_02_gradient_check(report):
    start = time.perf_counter()
    cfg = EncoderConfig(in_channels=3, num_joints=5, num_frames=8, graph="chain5", gcn_channels=(4, 4),
                        temporal_kernel=3, heads=2, model_dim=16, ffn_dim=16)
    torch.manual_seed(0)
    enc = DecouplingEncoder(cfg).double()
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(3, 3, 8, 5, 1, dtype=torch.float64, generator=gen)
    proj = torch.randn(32, dtype=torch.float64, generator=gen)

    def loss(m):
        z_s, z_t = m(x)
        return (torch.cat([z_t, z_s], dim=1) @ proj).pow(2).mean()

    analytic, numeric = finite_difference_check(enc, loss, n_params=24, step=1e-4, seed=1)
    err = relative_error(analytic, numeric)
    elapsed = time.perf_counter() - start
    ok = len(err) >= 20 and bool((err < 1e-3).all()) and elapsed < 60
    assert report(2, ok, f"{len(err)} parameters, max relative error {err.max():.2e}, {elapsed:.1f}s")


# -- 3. masking cardinality ----------------------------------------------------


def test_criterion_03_masking_cardinality(report):
    graph = get_graph("ntu25")
    sp, tp = SpatialMaskParams(n=2, num_seeds=5, k=8), TemporalMaskParams(s=16, r=6)
    x = np.ones((3, 64, 25, 1), dtype=np.float32)
    joint_counts, frame_counts = set(), set()
    for trial in range(1000):
        rng = np.random.default_rng([3, trial])
        joints = spatial_mask(x, graph, sp, rng)
        joint_counts.add(int((joints == 0).all(axis=(0, 1, 3)).sum()))
        frames = temporal_mask(x, tp, rng)
        frame_counts.add(int((frames == 0).all(axis=(0, 2, 3)).sum()))
    ok = joint_counts == {8} and frame_counts == {24}
    assert report(3, ok, f"masked joints per trial {sorted(joint_counts)}, frames {sorted(frame_counts)}")


# -- 4. adjacency power against walk enumeration -------------------------------


def count_walks(P, n):
    """Depth-first enumeration of every walk with ``n`` edges."""
    V = len(P)
    counts = np.zeros((V, V), dtype=np.int64)
    nbrs = [np.flatnonzero(P[i]) for i in range(V)]

    def walk(start, node, steps):
        if steps == 0:
            counts[start, node] += 1
            return
        for nxt in nbrs[node]:
            walk(start, nxt, steps - 1)

    for s in range(V):
        walk(s, s, n)
    return counts


def test_criterion_04_adjacency_power(report):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(50):
        V, n = int(rng.integers(2, 11)), int(rng.integers(1, 5))
        P = np.triu(rng.random((V, V)) < rng.uniform(0.1, 0.7), 1).astype(np.int64)
        P = P + P.T
        mismatches += not np.array_equal(power_adjacency(P, n), count_walks(P, n))
    assert report(4, mismatches == 0, f"{50 - mismatches}/50 random graphs match exactly")


# -- 5. momentum recurrence ----------------------------------------------------


def test_criterion_05_momentum(report):
    theta, xi = [torch.ones(1, dtype=torch.float64)], [torch.zeros(1, dtype=torch.float64)]
    for _ in range(1000):
        momentum_update(theta, xi, 0.999)
    scalar_err = abs(xi[0].item() - (1 - 0.999 ** 1000))

    gen = torch.Generator().manual_seed(5)
    a = [torch.randn(4, 3, generator=gen), torch.randn(7, generator=gen)]
    b = [torch.randn(4, 3, generator=gen), torch.randn(7, generator=gen)]
    want = [bb * 0.99 + aa * (1.0 - 0.99) for aa, bb in zip(a, b)]
    momentum_update(a, b, 0.99)
    exact = all(torch.equal(g, w) for g, w in zip(b, want))
    ok = scalar_err <= 1e-9 and exact
    assert report(5, ok, f"scalar error {scalar_err:.1e}, tensor update exact: {exact}")


# -- 6. queue semantics --------------------------------------------------------


def test_criterion_06_queue_fifo(report):
    rng = np.random.default_rng(6)
    queue, oracle = NegativeQueue(257, 3, dtype=torch.float64), FifoOracle(257)
    counter, bad = 0, 0
    for _ in range(10_000):
        b = int(rng.integers(0, 40))
        rows = np.arange(counter, counter + b, dtype=np.float64)[:, None] * np.array([1.0, -1.0, 0.5])
        counter += b
        queue.enqueue(torch.from_numpy(rows))
        oracle.push(rows)
        got, want = queue.contents().numpy(), oracle.contents()
        bad += got.shape[0] != len(oracle.items) or (len(want) and not np.array_equal(got, want))
    assert report(6, bad == 0, f"{10_000 - bad}/10000 insertions leave oracle-identical contents")


# -- shared desk-scale experiments for 7 to 9 ----------------------------------


class Experiment:
    def __init__(self):
        self.config = tiny_config()
        self.train, self.test = self.config.dataset.load_split()
        self.runs = {}

    def pretrained(self, seed, masking=True):
        key = (seed, masking)
        if key not in self.runs:
            cfg = self.config.replace(seed=seed)
            pipeline = cfg.augment if masking else cfg.augment.without("spatial_mask", "temporal_mask")
            start = time.perf_counter()
            trainer = Pretrainer(cfg, self.train, pipeline)
            trainer.run()
            self.runs[key] = (trainer, time.perf_counter() - start)
        return self.runs[key]

    def probe(self, encoder, seed, corrupt=None):
        encoder = recalibrate_bn(encoder, self.train, seed)
        tr = extract_embeddings(encoder, self.train, seed=seed)
        te = extract_embeddings(encoder, self.test, seed=seed, corrupt=corrupt)
        return tr, te, linear_probe(tr, te, self.config.probe, seed).top1


@pytest.fixture(scope="session")
def experiment():
    return Experiment()


@pytest.mark.slow
def test_criterion_07_learning_signal(experiment, report):
    start = time.perf_counter()
    trainer, _ = experiment.pretrained(0)
    losses = trainer.epoch_losses()
    tr, te, probe = experiment.probe(trainer.model.encoder, 0)
    knn = knn_retrieval(tr, te)
    elapsed = time.perf_counter() - start
    ratio = losses[-1] / losses[0]
    ok = (len(losses) == 30 and ratio < 0.6 and probe >= 0.8 and knn >= 0.7
          and min(probe, knn) >= 0.1 + 0.3 and elapsed < 15 * 60)
    assert report(7, ok, f"loss {losses[0]:.3f} -> {losses[-1]:.3f} (ratio {ratio:.3f}), "
                         f"probe {probe:.3f}, 1-NN {knn:.3f}, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_08_semi_supervised(experiment, report):
    pre, scratch = [], []
    for seed in SEEDS:
        trainer, _ = experiment.pretrained(seed)
        pre.append(finetune(trainer.model.encoder, experiment.train, experiment.test,
                            experiment.config, fraction=0.1, seed=seed).top1)
        scratch.append(finetune(None, experiment.train, experiment.test,
                                experiment.config, fraction=0.1, seed=seed).top1)
    gap = statistics.median(pre) - statistics.median(scratch)
    ok = gap >= 0.05
    assert report(8, ok, f"10% labels: pretrained {statistics.median(pre):.3f} {pre}, "
                         f"scratch {statistics.median(scratch):.3f} {scratch}, gap {gap * 100:+.1f} points")


@pytest.mark.slow
def test_criterion_09_masking_ablation(experiment, report):
    full, plain = [], []
    for seed in SEEDS:
        for masking, out in ((True, full), (False, plain)):
            trainer, _ = experiment.pretrained(seed, masking)
            out.append(experiment.probe(trainer.model.encoder, seed, corrupt=occlude)[2])
    ok = statistics.median(plain) <= statistics.median(full)
    assert report(9, ok, f"occluded-test probe: with masking {statistics.median(full):.3f} {full}, "
                         f"without {statistics.median(plain):.3f} {plain}")


# -- 10. determinism -----------------------------------------------------------


def test_criterion_10_determinism(report, tmp_path):
    cfg = tiny_config(dataset={"synthetic": {"classes": 4, "per_class": 8}},
                      contrast={"queue_size": 32}, pretrain={"epochs": 3, "batch_size": 8, "milestones": [2]},
                      checkpoint_every=1)
    data = cfg.dataset.load()
    for name in ("a", "b"):
        Pretrainer(cfg, data).run(run_dir=tmp_path / name)
    identical = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    full = Pretrainer(cfg, data)
    full.run()
    part = Pretrainer(cfg, data)
    part.run(max_steps=6)
    part.save(tmp_path / "mid.ckpt")
    resumed = Pretrainer.from_checkpoint(tmp_path / "mid.ckpt", data, cfg.config_hash())
    resumed.run()
    diff = max(abs(a.loss - b.loss) for a, b in zip(full.history[6:], resumed.history))
    same_length = len(resumed.history) == len(full.history) - 6
    ok = identical and same_length and diff <= 1e-6
    assert report(10, ok, f"metrics CSV byte-identical: {identical}; resumed loss max diff {diff:.1e}")
