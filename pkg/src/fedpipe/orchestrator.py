"""The federated round loop and experiment runner.

Each round distributes the global model, selects users, trains locally,
applies Byzantine behaviour, encodes, transmits, decodes and combines.
All randomness comes from named counter-based substreams keyed by round and
user, so results do not depend on evaluation order and a run can resume
from any checkpoint.
"""
from __future__ import annotations

import contextlib
import copy
import dataclasses
import hashlib
import json
import os
import platform
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import allocation, analysis, combining, encoding
from ._rng import substream
from .analysis import BOUND_COLUMNS, BoundParams, MetricsRecord
from .channel import (
    LinkSpec, OtaSpec, Precoder, gains_from_distances, link_rate, orthogonal_transmit, ota_decode,
    ota_mac, ota_precode,
)
from .combining import Attack, ClusterModelSet, UpdateBatch
from .config import ExperimentConfig, check
from .data import Pool, load_digits_split, make_cluster_generators, make_quadratic, partition_dataset, sample_clustered
from .encoding import LatticeSpec, ModelUpdate
from .exceptions import ConfigError, FedPipeError, RoundError
from .model import (
    LearningRate, LocalDataset, LossSpec, TrainingSchedule, accuracy, box_learning_rate, global_loss,
    hessian_bounds, init_params, load_columnar, local_loss, local_train, size_weights,
)

MODEL_MAGIC = b"FPMD"
MODEL_VERSION = 1


# -- problem setup ----------------------------------------------------------------


@dataclass(eq=False)
class Problem:
    """Everything fixed for the whole run: data, model, links, attackers."""

    datasets: list
    test: LocalDataset
    spec: LossSpec
    schedule: TrainingSchedule
    theta0: np.ndarray
    groups: np.ndarray
    distances: np.ndarray
    attackers: np.ndarray
    rates: Optional[np.ndarray] = None
    lattice: Optional[LatticeSpec] = None
    qsgd_step: Optional[float] = None
    ota: Optional[OtaSpec] = None
    test_groups: Optional[np.ndarray] = None
    densities: Optional[list] = None
    bound_params: Optional[BoundParams] = None
    bound_columns: tuple = ()

    @property
    def n_users(self) -> int:
        return len(self.datasets)

    @property
    def n_groups(self) -> int:
        return int(self.groups.max()) + 1

    @property
    def weights(self) -> np.ndarray:
        return size_weights(self.datasets)


def _split(ds: LocalDataset, fraction: float, rng) -> tuple[LocalDataset, LocalDataset]:
    if fraction <= 0:
        return ds, ds
    perm = rng.permutation(ds.n)
    n_test = max(1, int(round(fraction * ds.n)))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def _build_pool(cfg: ExperimentConfig, train=None, test=None, train_groups=None, test_groups=None):
    """Training pool (with cluster ids when clustered), test set and test cluster ids."""
    dc = cfg.data
    rng = substream(cfg.seeds.seed_for("data"), "data")
    if train is not None:
        if test is None:
            if train_groups is not None:
                raise ConfigError("clustered arrays need an explicit test set")
            train, test = _split(train, dc.test_fraction, rng)
        groups = None if train_groups is None else np.unique(train_groups, return_inverse=True)[1]
        return Pool(train, groups), test, test_groups
    if dc.source == "synthetic-quadratic":
        ds, _ = make_quadratic(dc.n_samples or 1000, dc.n_features, rng, dc.noise, dc.condition)
        train, test = _split(ds, dc.test_fraction, rng)
        return Pool(train), test, None
    if dc.source == "digits":
        train, test = load_digits_split(rng, dc.test_fraction)
        if dc.n_samples is not None and dc.n_samples < train.n:
            train = train.subset(np.sort(rng.permutation(train.n)[:dc.n_samples]))
        return Pool(train), test, None
    if dc.source == "clustered-regression":
        gens = make_cluster_generators(dc.n_clusters, dc.n_features, rng, dc.components, dc.separation,
                                       dc.spread, dc.noise)
        n_per = dc.n_samples or 300
        pool = sample_clustered(gens, n_per, rng)
        n_test = max(1, int(round(n_per * dc.test_fraction / (1.0 - dc.test_fraction)))) if dc.test_fraction else n_per
        test_pool = sample_clustered(gens, n_test, rng)
        return pool, test_pool.data, test_pool.groups
    if dc.source == "file":
        ds = load_columnar(dc.path)
        if dc.test_path:
            return Pool(ds), load_columnar(dc.test_path), None
        train, test = _split(ds, dc.test_fraction, rng)
        return Pool(train), test, None
    raise ConfigError(f"data.source {dc.source!r} needs arrays passed to the runner")


def _learning_rate(cfg: ExperimentConfig, datasets, spec: LossSpec) -> LearningRate:
    s = cfg.schedule
    if s.lr == "constant":
        return LearningRate("constant", eta0=s.eta0)
    if s.lr == "diminishing":
        return LearningRate("diminishing", mu=s.mu, gamma=s.gamma)
    bounds = [hessian_bounds(ds, spec) for ds in datasets]
    L, mu = max(b[0] for b in bounds), min(b[1] for b in bounds)
    if not mu > 0:
        raise ConfigError("schedule.lr 'box' needs a strongly convex objective on every user (mu > 0)")
    return box_learning_rate(L, mu, s.local_steps)


def prepare_problem(cfg: ExperimentConfig, train: Optional[LocalDataset] = None,
                    test: Optional[LocalDataset] = None, train_groups=None, test_groups=None) -> Problem:
    """Materialize data, partition, model and link constants from ``cfg``.

    ``train``/``test`` replace the configured data source; ``train_groups``
    gives the cluster id of each training sample for clustered partitions.
    """
    check(cfg)
    seeds = cfg.seeds
    N = cfg.n_users
    pool, test_ds, test_groups = _build_pool(cfg, train, test, train_groups, test_groups)
    datasets = partition_dataset(pool, N, cfg.partition.kind, substream(seeds.seed_for("partition"), "partition"),
                                 cfg.partition.shards_per_user)
    n_features = pool.data.n_features

    mc = cfg.model
    n_classes = 2
    if mc.kind in ("logistic", "mlp"):
        n_classes = max(2, int(max(pool.data.y.max(), test_ds.y.max())) + 1)
    spec = LossSpec(mc.kind, mc.reg, n_classes, mc.hidden, mc.fit_intercept)
    s = cfg.schedule
    schedule = TrainingSchedule(s.local_steps, s.batch_size, s.total_steps, _learning_rate(cfg, datasets, spec))
    theta0 = init_params(spec, n_features, substream(seeds.seed_for("init"), "init"))
    d = theta0.shape[0]

    if cfg.combiner.kind == "mixture":
        groups = np.arange(N) % np.unique(pool.groups).size
    else:
        groups = np.zeros(N, dtype=np.int64)

    ch = cfg.channel
    distances = (np.asarray(ch.distances, dtype=float) if ch.distances is not None
                 else np.linspace(ch.d_min, ch.d_max, N))
    gains = gains_from_distances(distances)

    n_att = int(np.floor(cfg.attack.fraction * N))
    attackers = np.sort(substream(seeds.seed_for("attack"), "attackers").permutation(N)[:n_att])

    problem = Problem(datasets, test_ds, spec, schedule, theta0, groups, distances, attackers,
                      test_groups=test_groups)

    if ch.kind == "orthogonal":
        K = ch.n_blocks or N
        interference = tuple(ch.interference) if ch.interference is not None else (0.0,) * K
        links = [LinkSpec(ch.bandwidth, ch.power, float(g), ch.noise_psd, interference) for g in gains]
        problem.rates = np.array([[link_rate(link, k) for k in range(K)] for link in links])
    else:
        problem.ota = OtaSpec(ch.noise_var, tuple(gains) if ch.fading else None, ch.inversion_threshold,
                              ch.precoder, ch.power, ch.fixed_alpha, ch.pilot_sqnorm, ch.safety)

    enc = cfg.encoder
    calib_seed = seeds.seed_for("dither")
    if enc.kind == "uveqfed":
        problem.lattice = (LatticeSpec.for_dim(enc.lattice_dim, enc.step, enc.zeta) if enc.step
                           else encoding.lattice_for_rate(enc.lattice_dim, enc.bits_per_param, d, enc.zeta, calib_seed))
    elif enc.kind == "qsgd":
        problem.qsgd_step = enc.step or float(
            encoding.lattice_for_rate(1, enc.bits_per_param, d, enc.zeta, calib_seed).generator[0, 0])

    if cfg.combiner.kind == "mixture":
        problem.densities = [
            ClusterModelSet.fit_density(LocalDataset.concat([datasets[i] for i in np.flatnonzero(groups == c)]).X,
                                        cfg.combiner.density_components, seeds.master)
            for c in range(problem.n_groups)
        ]

    if cfg.analysis.bounds:
        bp = analysis.estimate_bound_params(datasets, spec, schedule, theta0, seeds.master,
                                            cfg.analysis.probe_rounds)
        cols = ["fedavg_bound"]
        if problem.lattice is not None:
            bp = dataclasses.replace(bp, n_subvectors=problem.lattice.n_subvectors(d), zeta=problem.lattice.zeta,
                                     lattice_moment=problem.lattice.second_moment)
            cols.append("uveqfed_bound")
        if ch.kind == "ota":
            bp = dataclasses.replace(bp, d=d, noise_var=ch.noise_var, power=ch.power, n_users=N)
            cols.append("cotaf_bound")
        problem.bound_params = bp
        problem.bound_columns = tuple(c for c in BOUND_COLUMNS if c in cols)
    return problem


# -- round state ----------------------------------------------------------------------


@dataclass(eq=False)
class RoundState:
    """Server state between rounds.

    ``thetas`` holds one global model per group (a single group unless the
    mixture combiner runs one model per cluster). ``last_sync`` records the
    round at which each user last received and trained on the model.
    """

    round: int
    thetas: list
    last_sync: np.ndarray
    last_norms: np.ndarray
    bandit: allocation.BanditHistory
    precoders: list
    delay: float = 0.0
    bits: int = 0
    history: list = field(default_factory=list)

    def step(self, local_steps: int) -> int:
        return self.round * local_steps

    def copy(self) -> "RoundState":
        """Independent arrays and precoder state; metric records are shared."""
        return dataclasses.replace(
            self, thetas=[t.copy() for t in self.thetas], last_sync=self.last_sync.copy(),
            last_norms=self.last_norms.copy(),
            bandit=allocation.BanditHistory(self.bandit.mean_delay.copy(), self.bandit.counts.copy()),
            precoders=copy.deepcopy(self.precoders), history=list(self.history),
        )


def initial_state(problem: Problem) -> RoundState:
    N = problem.n_users
    return RoundState(
        round=0, thetas=[problem.theta0.copy() for _ in range(problem.n_groups)],
        last_sync=np.full(N, -1, dtype=np.int64), last_norms=np.zeros(N),
        bandit=allocation.BanditHistory.empty(N),
        precoders=[{"estimate": None, "frozen": None} for _ in range(problem.n_groups)],
    )


def _select(state: RoundState, problem: Problem, cfg: ExperimentConfig, r: int) -> np.ndarray:
    sel = cfg.selection
    N = problem.n_users
    rng = substream(cfg.seeds.seed_for("selection"), "selection", r)
    if sel.kind == "full":
        return np.arange(N)
    if sel.kind == "uniform":
        return allocation.select_uniform(N, sel.k, rng)
    if sel.kind == "probabilistic":
        return allocation.select_probabilistic(state.last_norms, problem.distances, sel.balance, sel.k, rng)
    if sel.kind == "round-robin":
        return allocation.select_round_robin(N, sel.k, r)
    return allocation.select_bandit(state.bandit, sel.k, r + 1, sel.explore)


def _attack(cfg: ExperimentConfig) -> Attack:
    a = cfg.attack
    return Attack(a.kind, a.magnitude, a.sigma, a.factor, a.reported_n)


def _reported_sizes(problem: Problem, cfg: ExperimentConfig) -> np.ndarray:
    n = np.array([ds.n for ds in problem.datasets], dtype=float)
    if cfg.attack.kind == "reported-size" and problem.attackers.size:
        n[problem.attackers] = cfg.attack.reported_n
    return n


def _group_weights(problem: Problem, cfg: ExperimentConfig) -> np.ndarray:
    """Aggregation weight of each user within its group, from reported sizes."""
    n = _reported_sizes(problem, cfg)
    p = np.zeros_like(n)
    for g in range(problem.n_groups):
        members = problem.groups == g
        p[members] = n[members] / n[members].sum()
    return p


def _encode(u: ModelUpdate, problem: Problem, cfg: ExperimentConfig, r: int, i: int):
    enc = cfg.encoder
    seed = cfg.seeds.seed_for("dither")
    if enc.kind == "identity":
        return encoding.dense_encode(u)
    if enc.kind == "topk":
        return encoding.topk_sparsify(u, min(enc.k, u.d))
    if enc.kind == "mask":
        return encoding.mask_sparsify(u, enc.keep_prob, substream(seed, "mask", r, i))
    if enc.kind == "qsgd":
        return encoding.qsgd_quantize(u, problem.qsgd_step, substream(seed, "qsgd", r, i),
                                      zeta=enc.zeta if enc.normalize else None)
    if enc.kind == "uveqfed":
        shared = int(substream(seed, "shared-dither", r, i).integers(2 ** 62))
        return encoding.uveqfed_encode(u, problem.lattice, shared)
    dp = encoding.DPSpec(enc.epsilon, enc.delta, enc.exposures, enc.clip, min(ds.n for ds in problem.datasets))
    return encoding.dp_gaussianize(u, dp, substream(seed, "dp-noise", r, i))


@contextlib.contextmanager
def _stage(r: int, name: str, user=None):
    try:
        yield
    except RoundError:
        raise
    except (FedPipeError, ValueError, FloatingPointError, ArithmeticError) as exc:
        raise RoundError(r + 1, name, user, exc) from exc


def _local_updates(state, problem, cfg, r, selected) -> dict:
    """Train every selected user (ascending id) and apply attacks."""
    E = cfg.schedule.local_steps
    attackers = set(problem.attackers.tolist())
    attack = _attack(cfg)
    out = {}
    for i in selected:
        i = int(i)
        ref = state.thetas[problem.groups[i]]
        with _stage(r, "local_train", i):
            theta = local_train(ref, problem.datasets[i], problem.spec, problem.schedule,
                                substream(cfg.seeds.seed_for("batches"), "batches", r, i), start_step=r * E)
            u = encoding.delta_encode(theta, ref, user_id=i, round=r + 1, n_samples=problem.datasets[i].n)
        if i in attackers:
            with _stage(r, "attack", i):
                u = combining.byzantine_perturb(u, attack, substream(cfg.seeds.seed_for("attack"), "attack", r, i))
        out[i] = u
    return out


def _combine(batch: UpdateBatch, cfg: ExperimentConfig, info: dict) -> np.ndarray:
    cb = cfg.combiner
    if cb.kind in ("fedavg", "mixture"):
        return combining.fedavg_combine(batch, cb.fedavg_mode)
    if cb.kind == "median":
        return batch.reference + combining.median_combine(batch, cb.weighted)
    if cb.kind == "trimmed-mean":
        agg, cut = combining.trimmed_mean_combine(batch, cb.beta, cb.weighted)
        info.setdefault("trimmed_per_side", []).append(cut)
        return batch.reference + agg
    row, uid = combining.krum_combine(batch, cb.f, cb.weighted)
    info.setdefault("krum_choice", []).append(uid)
    return batch.reference + row


def _orthogonal_round(state, problem, cfg, r, selected, updates, info):
    with _stage(r, "encode"):
        encoded = {i: _encode(updates[i], problem, cfg, r, i) for i in selected}
    with _stage(r, "allocate"):
        bits = [encoded[i].bit_cost for i in selected]
        D = allocation.delay_matrix(bits, problem.rates[selected])
        blocks, _ = allocation.assign_blocks(D)
    delays = {}
    decoded = {}
    for i, k in zip(selected, blocks):
        with _stage(r, "transmit", i):
            received, delays[i] = orthogonal_transmit(encoded[i], float(problem.rates[i, k]))
        with _stage(r, "decode", i):
            decoded[i] = encoding.decode(received)
    info["blocks"] = [int(k) for k in blocks]
    p = _group_weights(problem, cfg)
    thetas = []
    for g in range(problem.n_groups):
        members = [i for i in selected if problem.groups[i] == g]
        ref = state.thetas[g]
        if not members:
            thetas.append(ref.copy())
            continue
        rows = [decoded[i].delta for i in members]
        w = [p[i] for i in members]
        ids = list(members)
        if cfg.emit_excluded:
            for i in np.flatnonzero(problem.groups == g):
                if i not in decoded:
                    rows.append(np.zeros_like(ref))
                    w.append(0.0)
                    ids.append(int(i))
            order = np.argsort(ids, kind="stable")
            rows, w, ids = [rows[j] for j in order], [w[j] for j in order], [ids[j] for j in order]
        batch = UpdateBatch(np.stack(rows), w, ref, ids, int(np.sum(problem.groups == g)))
        with _stage(r, "combine"):
            thetas.append(_combine(batch, cfg, info))
    return thetas, max(delays.values()), int(sum(bits)), delays, {i: float(np.linalg.norm(decoded[i].delta)) for i in selected}


def _ota_round(state, problem, cfg, r, selected, updates, info):
    spec = problem.ota
    p = _group_weights(problem, cfg)
    thetas = []
    alphas = []
    truncated_all = []
    for g in range(problem.n_groups):
        ref = state.thetas[g]
        n_g = int(np.sum(problem.groups == g))
        members = [i for i in selected if problem.groups[i] == g]
        if not members:
            thetas.append(ref.copy())
            continue
        scaled = {i: updates[i].replace(delta=n_g * p[i] * updates[i].delta) for i in members}
        sq = [float(scaled[i].delta @ scaled[i].delta) for i in members]
        pre = Precoder(spec, **state.precoders[g])
        with _stage(r, "precode"):
            if not pre.primed:
                pre.prime(sq)
            alpha = pre.alpha()
            inputs, gains, active = [], [], 0
            senders = np.flatnonzero(problem.groups == g) if cfg.emit_excluded else members
            for i in senders:
                i = int(i)
                gain = spec.gain(i)
                if i in scaled:
                    x, cut = ota_precode(scaled[i], alpha, gain, spec)
                    active += not cut
                    if cut:
                        truncated_all.append(i)
                else:
                    x = np.zeros_like(ref)
                inputs.append(x)
                gains.append(gain)
        with _stage(r, "channel"):
            y = ota_mac(inputs, spec.noise_var, substream(cfg.seeds.seed_for("channel"), "channel", r, g),
                        gains if spec.gains is not None else None).y
        with _stage(r, "decode"):
            thetas.append(ota_decode(y, alpha, active, ref) if active else ref.copy())
        pre.observe(sq)
        state.precoders[g] = pre.state()
        alphas.append(alpha)
    info["alpha"] = alphas
    if truncated_all:
        info["truncated"] = truncated_all
    slot = cfg.channel.slot_s
    return thetas, slot, 0, {i: slot for i in selected}, {i: float(np.linalg.norm(updates[i].delta)) for i in selected}


def _prediction_loss(pred, y, spec: LossSpec) -> float:
    if spec.kind == "quadratic-synthetic":
        return float(0.5 * np.mean((pred - y) ** 2))
    if spec.kind == "squared-error":
        return float(np.mean((pred - y) ** 2))
    prob = np.clip(pred[np.arange(y.shape[0]), y.astype(int)], 1e-300, None)
    return float(-np.mean(np.log(prob)))


def evaluate(thetas, problem: Problem) -> tuple[float, float, float]:
    """``(train_loss, test_loss, test_acc)`` of the current global model(s).

    With several groups the training loss weights each user's loss under its
    own group's model, and test predictions use the density-gated mixture.
    """
    p = problem.weights
    spec = problem.spec
    if len(thetas) == 1:
        theta = thetas[0]
        return (global_loss(theta, problem.datasets, p, spec), local_loss(theta, problem.test, spec),
                accuracy(theta, problem.test, spec))
    train = float(sum(pi * local_loss(thetas[problem.groups[i]], ds, spec)
                      for i, (pi, ds) in enumerate(zip(p, problem.datasets))))
    models = ClusterModelSet(list(thetas), problem.densities, spec)
    pred = combining.mixture_predict(problem.test.X, models)
    acc = float(np.mean(np.argmax(pred, axis=1) == problem.test.y)) if spec.is_classifier else float("nan")
    return train, _prediction_loss(pred, problem.test.y, spec), acc


def run_round(state: RoundState, problem: Problem, cfg: ExperimentConfig) -> RoundState:
    """Execute one aggregation round and return the next state."""
    state = state.copy()
    r = state.round
    with _stage(r, "select"):
        selected = [int(i) for i in _select(state, problem, cfg, r)]
    updates = _local_updates(state, problem, cfg, r, selected)
    info: dict = {}
    round_fn = _ota_round if cfg.channel.kind == "ota" else _orthogonal_round
    thetas, delay, bits, delays, norms = round_fn(state, problem, cfg, r, selected, updates, info)
    for th in thetas:
        if not np.all(np.isfinite(th)):
            raise RoundError(r + 1, "combine", None, FloatingPointError("global model became non-finite"))
    for i in selected:
        state.bandit.record(i, delays[i])
        state.last_norms[i] = norms[i]
        state.last_sync[i] = r
    state.thetas = [np.asarray(t, dtype=float) for t in thetas]
    state.round = r + 1
    state.delay = state.delay + delay
    state.bits = state.bits + bits
    train, test, acc = evaluate(state.thetas, problem)
    bounds = {}
    if problem.bound_params is not None:
        bp = problem.bound_params.at(state.round * cfg.schedule.local_steps)
        fns = {"fedavg_bound": analysis.fedavg_bound, "uveqfed_bound": analysis.uveqfed_bound,
               "cotaf_bound": analysis.cotaf_bound}
        bounds = {c: fns[c](bp) for c in problem.bound_columns}
    state.history.append(MetricsRecord(state.round, state.delay, state.bits, train, test, acc, bounds,
                                       tuple(selected), info))
    return state


# -- files -------------------------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def model_to_bytes(thetas) -> bytes:
    """Header (magic, version, number of models, length) then little-endian float64 values."""
    arr = np.atleast_2d(np.asarray(thetas, dtype="<f8"))
    return MODEL_MAGIC + struct.pack("<HHQ", MODEL_VERSION, arr.shape[0], arr.shape[1]) + arr.tobytes()


def model_from_bytes(raw: bytes) -> np.ndarray:
    if raw[:4] != MODEL_MAGIC:
        raise ValueError("not a model file")
    version, n_models, d = struct.unpack_from("<HHQ", raw, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {version}")
    body = raw[4 + struct.calcsize("<HHQ"):]
    if len(body) != 8 * n_models * d:
        raise ValueError("model file is truncated")
    return np.frombuffer(body, dtype="<f8").reshape(n_models, d).copy()


def read_model(path) -> np.ndarray:
    return model_from_bytes(Path(path).read_bytes())


def config_digest(cfg: ExperimentConfig) -> str:
    resolved = cfg.to_dict()
    resolved.pop("output")
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()


def _checkpoint_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output.dir) / "checkpoints"


def save_checkpoint(state: RoundState, cfg: ExperimentConfig) -> Path:
    base = _checkpoint_dir(cfg) / f"round_{state.round:06d}"
    arrays = {"thetas": np.stack(state.thetas), "last_sync": state.last_sync, "last_norms": state.last_norms,
              "bandit_mean": state.bandit.mean_delay, "bandit_counts": state.bandit.counts}
    with tempfile.TemporaryFile() as fh:
        np.savez(fh, **arrays)
        fh.seek(0)
        _atomic_write(base.with_suffix(".npz"), fh.read())
    meta = {"round": state.round, "delay": state.delay, "bits": state.bits, "precoders": state.precoders,
            "history": [rec.to_dict() for rec in state.history], "config_digest": config_digest(cfg)}
    _atomic_write(base.with_suffix(".json"), json.dumps(meta).encode())
    return base


def load_checkpoint(cfg: ExperimentConfig, round_index: Optional[int] = None) -> Optional[RoundState]:
    """Latest checkpoint (or the one at ``round_index``); ``None`` if there is none."""
    found = sorted(_checkpoint_dir(cfg).glob("round_*.json"))
    if round_index is not None:
        found = [f for f in found if f.stem == f"round_{round_index:06d}"]
    if not found:
        return None
    meta = json.loads(found[-1].read_text())
    if meta["config_digest"] != config_digest(cfg):
        raise ConfigError(f"checkpoint {found[-1]} was written by a different configuration")
    with np.load(found[-1].with_suffix(".npz")) as z:
        return RoundState(
            round=meta["round"], thetas=list(z["thetas"]), last_sync=z["last_sync"], last_norms=z["last_norms"],
            bandit=allocation.BanditHistory(z["bandit_mean"], z["bandit_counts"]),
            precoders=meta["precoders"], delay=meta["delay"], bits=meta["bits"],
            history=[MetricsRecord.from_dict(h) for h in meta["history"]],
        )


# -- experiment --------------------------------------------------------------------


@dataclass(eq=False)
class RunResult:
    state: RoundState
    problem: Problem
    paths: dict = field(default_factory=dict)

    @property
    def records(self) -> list:
        return self.state.history

    @property
    def thetas(self) -> list:
        return self.state.thetas

    def metrics_csv(self) -> str:
        return analysis.metrics_csv(self.records, self.problem.bound_columns)


def _manifest(cfg: ExperimentConfig, result: RunResult, csv_text: str) -> dict:
    import scipy
    import sklearn

    return {
        "config": cfg.to_dict(),
        "config_digest": config_digest(cfg),
        "seeds": {name: cfg.seeds.seed_for(name) for name in
                  ("data", "partition", "init", "batches", "selection", "dither", "channel", "attack")},
        "rounds_completed": result.state.round,
        "n_rounds": result.problem.schedule.n_rounds,
        "attackers": result.problem.attackers.tolist(),
        "model_dim": int(result.problem.theta0.shape[0]),
        "metrics_sha256": hashlib.sha256(csv_text.encode()).hexdigest(),
        "rounds": [{"round": rec.round, "participants": list(rec.participants), "info": rec.info}
                   for rec in result.records],
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
                     "scikit-learn": sklearn.__version__},
        "outputs": {k: str(v) for k, v in result.paths.items()},
    }


def write_outputs(cfg: ExperimentConfig, result: RunResult) -> dict:
    out = Path(cfg.output.dir)
    paths = {"metrics": out / cfg.output.metrics, "model": out / cfg.output.model,
             "manifest": out / cfg.output.manifest}
    result.paths = paths
    csv_text = result.metrics_csv()
    _atomic_write(paths["metrics"], csv_text.encode())
    _atomic_write(paths["model"], model_to_bytes(result.thetas))
    _atomic_write(paths["manifest"], json.dumps(_manifest(cfg, result, csv_text), indent=2, default=float).encode())
    return paths


def run_experiment(cfg: ExperimentConfig, resume: bool = False, write: bool = True,
                   train: Optional[LocalDataset] = None, test: Optional[LocalDataset] = None,
                   stop_after: Optional[int] = None, problem: Optional[Problem] = None,
                   train_groups=None) -> RunResult:
    """Run ``T / E`` rounds and (optionally) write metrics, model and manifest.

    Args:
        cfg: validated before anything runs; every problem is reported.
        resume: continue from the latest checkpoint in the output directory.
        write: write the output files.
        train, test: datasets used instead of ``cfg.data`` (``source: arrays``).
        train_groups: cluster id of every training sample, for clustered partitions.
        stop_after: halt after this many rounds (simulates an interruption).
        problem: a prepared problem to reuse across runs.
    """
    check(cfg)
    problem = problem or prepare_problem(cfg, train, test, train_groups)
    state = load_checkpoint(cfg) if resume else None
    state = state or initial_state(problem)
    n_rounds = problem.schedule.n_rounds
    every = cfg.output.checkpoint_every
    while state.round < n_rounds and (stop_after is None or state.round < stop_after):
        state = run_round(state, problem, cfg)
        if write and every and state.round % every == 0:
            save_checkpoint(state, cfg)
    result = RunResult(state, problem)
    if write:
        write_outputs(cfg, result)
    return result


def run_sweep(cfg: ExperimentConfig, param: str, values, write: bool = True) -> list:
    """One run per value of the dotted config path ``param``, each in its own subdirectory."""
    results = []
    for value in values:
        sub = cfg.replace(**{param: value, "output.dir": str(Path(cfg.output.dir) / f"{param}={value}")})
        results.append((value, run_experiment(sub, write=write)))
    return results
