"""In-process simulation of synchronous projected-NTK decentralized training.

Each round every client computes a Jacobian and logits on a local
minibatch, sketches the Jacobian, and sends one message to each neighbour.
Then every client stacks what it received, builds the kernel, evolves its
predictions toward the (possibly distilled) targets, back-projects the
sketch-space update and applies momentum.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as data_mod
from . import topology
from .config import RunConfig
from .distillation import DistillSchedule, build_target
from .errors import CheckpointError, ConfigurationError, SparkError
from .kernel_engine import aggregate, build_kernel, compressed_update, evolve, split_validation
from .model import (
    MlpArchitecture, WeightVector, cross_entropy, forward, init_weights, jacobian, one_hot, softmax,
)
from .optimizer import MomentumState, effective_step, momentum_step
from .projection import (
    Codec, ProjectionSpec, back_project, choose_rows, compress_mlp, jacobian_reduction,
)
from .wire import decode_wire, encode_wire

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPKC"
CHECKPOINT_VERSION = 1

# stream tags for per-purpose random generators
_INIT, _BATCH, _ROWS, _VAL, _PART, _TOPO, _HOLDOUT, _PROBE = range(8)

METRIC_COLUMNS = [
    "round", "agg_acc", "agg_loss", "client_acc", "train_loss", "bytes", "jacobian_bytes",
    "wall_time", "mean_t_star", "truncated", "f16_clamped", "connected",
    "grad_norm_sq", "effective_step_norm",
]


@dataclass
class RoundMetrics:
    round: int
    agg_acc: float
    agg_loss: float
    client_acc: float
    train_loss: float
    bytes: int
    jacobian_bytes: int
    wall_time: float
    mean_t_star: float
    truncated: int = 0
    f16_clamped: int = 0
    connected: bool = True
    grad_norm_sq: float = float("nan")
    effective_step_norm: float = float("nan")
    client_bytes: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("client_bytes")
        return d


def _rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, *tags])


def load_datasets(cfg: RunConfig, seed: int):
    """Training set and global holdout described by ``cfg.data``."""
    d = cfg.data
    if d.source == "synthetic":
        train = data_mod.synth_gaussians(d.num_classes, d.n_per_class, d.dim, d.spread, seed, d.scale)
        hold = data_mod.synth_gaussians(d.num_classes, d.holdout_per_class, d.dim, d.spread,
                                        seed ^ 0x5EED, d.scale)
    else:
        train = data_mod.load_idx_dir(d.path, "train")
        hold = data_mod.load_idx_dir(d.path, "test")
        if d.train_limit:
            train = train.subset(_rng(seed, _PART, 1).permutation(len(train))[:d.train_limit])
        if d.holdout_limit:
            hold = hold.subset(np.arange(min(d.holdout_limit, len(hold))))
    return train, hold


def evaluate(weights: WeightVector, holdout: data_mod.Dataset) -> tuple[float, float]:
    """Accuracy and hard-label cross-entropy on ``holdout``."""
    if len(holdout) == 0:
        raise ConfigurationError("holdout set is empty")
    logits = forward(weights, holdout.images)
    acc = float(np.mean(logits.argmax(axis=1) == holdout.labels))
    return acc, cross_entropy(logits, one_hot(holdout.labels, logits.shape[1]))


def evaluate_clients(arch: MlpArchitecture, flat_weights: np.ndarray, holdout) -> dict:
    """Aggregated-model accuracy (uniform weight average) and mean client accuracy."""
    avg = WeightVector.from_flat(arch, flat_weights.mean(axis=0))
    agg_acc, agg_loss = evaluate(avg, holdout)
    client = [evaluate(WeightVector.from_flat(arch, w), holdout)[0] for w in flat_weights]
    return {"agg_acc": agg_acc, "agg_loss": agg_loss, "client_acc": float(np.mean(client))}


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=os.path.dirname(__file__))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class Simulation:
    """Holds run state between rounds; ``run`` advances it to the configured horizon."""

    def __init__(self, cfg: RunConfig, seed: int | None = None, datasets=None):
        self.cfg = cfg.validate()
        self.seed = int(cfg.experiment.seeds[0] if seed is None else seed)
        self.train_set, self.holdout = datasets or load_datasets(cfg, self.seed)
        t = cfg.topology
        self.arch = MlpArchitecture(self.train_set.input_dim, cfg.model.hidden_dim,
                                    self.train_set.num_classes)
        self.layer_dims = self.arch.layer_dims
        self.partition = data_mod.dirichlet_partition(self.train_set, t.clients, cfg.data.alpha,
                                                      int(_rng(self.seed, _PART).integers(2**63)))
        pseed = cfg.projection.seed if cfg.projection.seed >= 0 else self.seed
        self.spec = ProjectionSpec(pseed, cfg.projection.k, cfg.projection_mode, cfg.projection.allocation)
        self.spec.widths(self.layer_dims)  # fail early on an impossible allocation
        self.codec = Codec(cfg.projection.codec)
        self.schedule = None
        if cfg.train.rounds:
            self.schedule = DistillSchedule(
                cfg.train.rounds, cfg.distill.alpha_init, cfg.distill.alpha_final,
                cfg.distill.tau_init, cfg.distill.tau_final, cfg.warmup_rounds(), cfg.distill_off,
            )
        self.round = 0
        self.weights = self._initial_weights()
        self.velocity = np.zeros_like(self.weights)
        self.metrics: list[RoundMetrics] = []
        self._probe = None

    # -- setup -----------------------------------------------------------------

    def _initial_weights(self) -> np.ndarray:
        m = self.cfg.topology.clients
        if self.cfg.train.shared_init:
            w = init_weights(self.arch, _rng(self.seed, _INIT)).flat()
            return np.tile(w, (m, 1))
        return np.stack([init_weights(self.arch, _rng(self.seed, _INIT, i)).flat() for i in range(m)])

    def batch_indices(self, client: int, rnd: int) -> np.ndarray:
        """Sorted dataset indices of ``client``'s minibatch in round ``rnd`` (1-based).

        Each epoch walks a fresh permutation of the shard in chunks of the
        batch size; a short final chunk is topped up from the start of the
        same permutation.  The batch is a pure function of (seed, client, round).
        """
        shard = self.partition.client_indices[client]
        n = shard.size
        b = min(self.cfg.train.batch_size, n)
        per_epoch = -(-n // b)
        epoch, j = divmod(rnd - 1, per_epoch)
        perm = _rng(self.seed, _BATCH, client, epoch).permutation(n)
        pos = np.arange(j * b, (j + 1) * b) % n
        return np.sort(shard[perm[pos]])

    def graph(self, rnd: int) -> topology.RoundGraph:
        t = self.cfg.topology
        return topology.generate(t.clients, t.degree, 0 if t.static else rnd,
                                 int(_rng(self.seed, _TOPO).integers(2**63)))

    def weight_vector(self, client: int) -> WeightVector:
        return WeightVector.from_flat(self.arch, self.weights[client])

    # -- one round -----------------------------------------------------------------

    def _local(self, i: int, rnd: int):
        idx = self.batch_indices(i, rnd)
        rows = choose_rows(idx.size, self.cfg.projection.sample_fraction, _rng(self.seed, _ROWS, rnd, i))
        idx = idx[rows]
        x, y = self.train_set.images[idx], self.train_set.labels[idx]
        w = self.weight_vector(i)
        logits = forward(w, x)
        cj = compress_mlp(w, x, self.spec, owner_client=i)
        cj.sample_indices = idx
        cj.logits, cj.labels = logits, y
        stats: dict = {}
        payload = encode_wire(cj, self.codec, stats)
        loss = cross_entropy(logits, one_hot(y, self.arch.num_classes))
        return cj, payload, stats.get("f16_clamped", 0), loss

    def _update(self, i: int, rnd: int, own, inbox):
        cfg = self.cfg
        val = split_validation(own.sample_count, cfg.train.val_fraction, _rng(self.seed, _VAL, rnd, i))
        agg = aggregate(own, inbox, val_rows=val)
        kernel = build_kernel(agg, cfg.train.memory_cap_mib * 2**20)
        target = build_target(one_hot(agg.labels, self.arch.num_classes), agg.logits, self.schedule, rnd)
        tr, va = agg.train_rows, agg.val_rows
        eta_f = cfg.train.eta / agg.row_count if cfg.train.loss_reduction == "mean" else cfg.train.eta
        evo = evolve(kernel, agg.logits[tr], agg.logits[va], target.rows[tr], eta_f,
                     cfg.train.t_evolve, val_labels=agg.labels[va], keep_trajectory=False)
        delta = back_project(compressed_update(agg, evo, cfg.train.eta), self.spec, self.layer_dims)
        return np.concatenate([delta[name] for name in self.layer_dims]), evo

    def step(self) -> RoundMetrics:
        """Advance one synchronous round and record its metrics."""
        cfg = self.cfg
        rnd = self.round + 1
        m = cfg.topology.clients
        t0 = time.perf_counter()
        graph = self.graph(rnd)
        with ThreadPoolExecutor(cfg.train.workers) as pool:
            local = list(pool.map(lambda i: self._local(i, rnd), range(m)))
        client_bytes = [0] * m
        jac_bytes = 0
        inboxes: list[list] = [[] for _ in range(m)]
        for i in range(m):
            cj, payload, _, _ = local[i]
            for j in topology.neighbors(graph, i):
                inboxes[j].append(decode_wire(payload))
                client_bytes[i] += len(payload)
                jac_bytes += sum(v.size for v in cj.layers.values()) * self.codec.itemsize

        def update(i):
            try:
                return self._update(i, rnd, local[i][0], inboxes[i])
            except SparkError as exc:
                raise type(exc)(f"round {rnd}, client {i}: {exc}") from exc

        with ThreadPoolExecutor(cfg.train.workers) as pool:
            results = list(pool.map(update, range(m)))
        mu = cfg.effective_mu
        step_norms = []
        for i, (delta, _) in enumerate(results):
            state = MomentumState(self.velocity[i], mu)
            if cfg.diagnostics.enabled:
                step_norms.append(float(np.linalg.norm(effective_step(state, delta))))
            state, self.weights[i] = momentum_step(state, self.weights[i], delta)
            self.velocity[i] = state.velocity
        self.round = rnd
        ev = evaluate_clients(self.arch, self.weights, self.holdout)
        connected = graph.is_connected()
        if not connected:
            log.info("round %d: communication graph is disconnected", rnd)
        metrics = RoundMetrics(
            round=rnd,
            agg_acc=ev["agg_acc"],
            agg_loss=ev["agg_loss"],
            client_acc=ev["client_acc"],
            train_loss=float(np.mean([loc[3] for loc in local])),
            bytes=int(sum(client_bytes)),
            jacobian_bytes=int(jac_bytes),
            wall_time=time.perf_counter() - t0,
            mean_t_star=float(np.mean([evo.t_star for _, evo in results])),
            truncated=int(sum(evo.truncated for _, evo in results)),
            f16_clamped=int(sum(loc[2] * len(topology.neighbors(graph, i)) for i, loc in enumerate(local))),
            connected=connected,
            client_bytes=client_bytes,
        )
        if cfg.diagnostics.enabled:
            metrics.grad_norm_sq = self.averaged_gradient_norm_sq()
            metrics.effective_step_norm = float(np.mean(step_norms))
        self.metrics.append(metrics)
        return metrics

    def run(self, rounds: int | None = None, on_round=None) -> list[RoundMetrics]:
        """Run until ``rounds`` total rounds (default: the configured horizon)."""
        horizon = self.cfg.train.rounds if rounds is None else rounds
        while self.round < horizon:
            metrics = self.step()
            if on_round is not None:
                on_round(self, metrics)
        return self.metrics

    # -- diagnostics ---------------------------------------------------------------

    def averaged_gradient_norm_sq(self) -> float:
        """Squared gradient norm of the hard-label loss at the averaged weights on a fixed probe batch."""
        if self._probe is None:
            n = min(self.cfg.diagnostics.probe_size, len(self.train_set))
            self._probe = np.sort(_rng(self.seed, _PROBE).choice(len(self.train_set), n, replace=False))
        x = self.train_set.images[self._probe]
        y = one_hot(self.train_set.labels[self._probe], self.arch.num_classes)
        w = WeightVector.from_flat(self.arch, self.weights.mean(axis=0))
        resid = softmax(forward(w, x)) - y
        grad = np.einsum("ncp,nc->p", jacobian(w, x).flat(), resid) / x.shape[0]
        return float(grad @ grad)

    def jacobian_reduction(self) -> float:
        return jacobian_reduction(self.spec, self.layer_dims)

    def manifest(self) -> dict:
        sizes = self.partition.sizes()
        return {
            "config": self.cfg.to_dict(),
            "seed": self.seed,
            "git_describe": _git_describe(),
            "architecture": {"input_dim": self.arch.input_dim, "hidden_dim": self.arch.hidden_dim,
                             "num_classes": self.arch.num_classes,
                             "parameter_count": self.arch.parameter_count},
            "projection": {
                "mode": self.spec.mode.value,
                "global_seed": self.spec.global_seed,
                "widths": self.spec.widths(self.layer_dims),
                "layer_seeds": self.spec.layer_seeds(self.layer_dims),
                "jacobian_reduction": self.jacobian_reduction(),
                "compression": f"compression {100 * self.jacobian_reduction():.1f}%",
            },
            "client_sample_counts": sizes.tolist(),
            "evaluation": "holdout accuracy of the averaged model and of every client, after every round",
        }

    # -- checkpoints ---------------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Little-endian container: magic, version, JSON header, weights, velocities."""
        header = json.dumps({
            "config": self.cfg.to_dict(),
            "seed": self.seed,
            "round": self.round,
            "shape": list(self.weights.shape),
            "metrics": [asdict(m) for m in self.metrics],
        }).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
            fh.write(header)
            fh.write(self.weights.astype("<f8").tobytes())
            fh.write(self.velocity.astype("<f8").tobytes())

    @classmethod
    def restore(cls, path, datasets=None, cfg: RunConfig | None = None) -> "Simulation":
        """Rebuild a simulation from :meth:`save_checkpoint` output.

        ``cfg`` may extend the horizon (``train.rounds``) of the stored run.
        """
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
        if len(raw) < 10:
            raise CheckpointError(f"{path}: truncated header")
        version, hlen = struct.unpack("<HI", raw[4:10])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
        stored = RunConfig.from_dict(header["config"])
        sim = cls(cfg or stored, header["seed"], datasets)
        shape = tuple(header["shape"])
        if sim.weights.shape != shape:
            raise CheckpointError(f"{path}: weight shape {shape} does not match the configuration")
        count = shape[0] * shape[1]
        body = np.frombuffer(raw, dtype="<f8", offset=10 + hlen)
        if body.size != 2 * count:
            raise CheckpointError(f"{path}: truncated weight payload")
        sim.weights = body[:count].reshape(shape).astype(np.float64)
        sim.velocity = body[count:].reshape(shape).astype(np.float64)
        sim.round = header["round"]
        sim.metrics = [RoundMetrics(**m) for m in header["metrics"]]
        return sim


def write_metrics_csv(path, metrics: list[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for m in metrics:
            writer.writerow(m.row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(cfg: RunConfig, seed: int | None = None, datasets=None):
    """Run one seed to completion; returns ``(metrics, final client weights)``."""
    sim = Simulation(cfg, seed, datasets)
    sim.run()
    return sim.metrics, sim.weights.copy()
