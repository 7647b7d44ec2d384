"""DQN training of the shared phase-competition network, one agent per intersection."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import frap
from .frap import Batch, FrapConfig, ParamStore, PhaseStructure
from .metrics import EpisodeMetrics, MetricsAccumulator, finalize, record_step
from .network import FlowSpec, RoadNetwork
from .sim import SimConfig, SimState, init_sim, lane_count_vector, step

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class EpsilonSchedule:
    initial: float = 0.8
    decay: float = 0.9995
    minimum: float = 0.01

    def value(self, decision_index: int) -> float:
        return epsilon_value(self, decision_index)


def epsilon_value(schedule: EpsilonSchedule, decision_index: int) -> float:
    if decision_index < 0:
        raise ValueError("decision_index must be >= 0")
    return max(schedule.minimum, schedule.initial * schedule.decay ** decision_index)


@dataclass(frozen=True)
class AgentConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    buffer_size: int = 50_000
    episodes: int = 200
    gamma: float = 0.95
    target_sync_every: int = 500
    grad_clip: float = 5.0
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    reward: str = "abs_sum"  # or "sum"
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size > self.buffer_size:
            raise ValueError("batch_size cannot exceed the buffer size")
        if self.reward not in ("abs_sum", "sum"):
            raise ValueError("reward must be 'abs_sum' or 'sum'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


# --------------------------------------------------------------------------
# observations and rewards


@dataclass(frozen=True)
class Observation:
    current_phase: np.ndarray  # one-hot, length P
    incoming_counts: np.ndarray  # per incoming lane, occupancy / capacity
    outgoing_counts: np.ndarray  # per outgoing lane, occupancy / capacity


def build_observation(state: SimState, intersection: int) -> Observation:
    it = state.net.intersections[intersection]
    ci = state.compiled.intersections[intersection]
    counts = lane_count_vector(state)
    cap = state.compiled.capacity
    onehot = np.zeros(len(it.phases))
    onehot[state.active_phase[intersection]] = 1.0
    inc = np.array([counts[l] / cap[l] for l in ci.incoming])
    out = np.array([counts[l] / cap[l] for l in ci.outgoing])
    return Observation(onehot, inc, out)


def observation_features(obs: Observation, state_or_net, intersection: int) -> np.ndarray:
    """Per-movement (incoming, outgoing, green) features of one observation."""
    net = getattr(state_or_net, "net", state_or_net)
    it = net.intersections[intersection]
    inc = {l.id: k for k, l in enumerate(it.incoming)}
    out = {l.id: k for k, l in enumerate(it.outgoing)}
    phase = int(np.argmax(obs.current_phase))
    green = set(it.phases[phase].movements) | set(it.always_green)
    feats = np.zeros((len(it.movements), frap.N_FEATURES))
    for i, m in enumerate(it.movements):
        feats[i] = (obs.incoming_counts[inc[m.from_lane]], obs.outgoing_counts[out[m.to_lane]], float(i in green))
    return feats


def compute_reward(state: SimState, intersection: int, mode: str = "abs_sum") -> float:
    """Negative intersection pressure built from capacity-normalized movement pressures."""
    ci = state.compiled.intersections[intersection]
    counts = lane_count_vector(state)
    cap = state.compiled.capacity
    total = math.fsum(counts[m.from_lane] / cap[m.from_lane] - counts[m.to_lane] / cap[m.to_lane]
                      for m in ci.movements)
    return -abs(total) if mode == "abs_sum" else -total


class Encoder:
    """Vectorized observation features for every intersection of a network."""

    def __init__(self, net: RoadNetwork, lane_index: dict[str, int], max_neighbors: int):
        self.net = net
        self.structures: list[PhaseStructure] = []
        keys: dict[tuple, int] = {}
        self.kind: list[int] = []
        self.src, self.dst, self.green = [], [], []
        for it in net.intersections:
            st = PhaseStructure.from_intersection(it)
            if st.key not in keys:
                keys[st.key] = len(self.structures)
                self.structures.append(st)
            self.kind.append(keys[st.key])
            self.src.append(np.array([lane_index[m.from_lane] for m in it.movements]))
            self.dst.append(np.array([lane_index[m.to_lane] for m in it.movements]))
            g = st.membership.copy()
            g[:, list(it.always_green)] = 1.0
            self.green.append(g)
        self.K = min(max_neighbors, max((len(it.neighbors) for it in net.intersections), default=0))
        self.Mn = max(len(it.movements) for it in net.intersections)
        self.neighbors = [[net.intersection_index(n) for n in it.neighbors[: self.K]] for it in net.intersections]
        n = len(net.intersections)
        self.nmask = np.zeros((n, self.K), dtype=bool)
        self.mmask = np.zeros((n, self.K, self.Mn))
        for k, nbrs in enumerate(self.neighbors):
            for j, nb in enumerate(nbrs):
                self.nmask[k, j] = True
                self.mmask[k, j, : len(net.intersections[nb].movements)] = 1.0

    def features(self, state: SimState) -> list[np.ndarray]:
        occ = lane_count_vector(state) / np.asarray(state.compiled.capacity, dtype=float)
        out = []
        for k in range(len(self.src)):
            f = np.empty((len(self.src[k]), frap.N_FEATURES))
            f[:, 0] = occ[self.src[k]]
            f[:, 1] = occ[self.dst[k]]
            f[:, 2] = self.green[k][state.active_phase[k]]
            out.append(f)
        return out

    def neighbor_features(self, feats: list[np.ndarray], k: int) -> np.ndarray:
        nx = np.zeros((self.K, self.Mn, frap.N_FEATURES))
        for j, nb in enumerate(self.neighbors[k]):
            nx[j, : feats[nb].shape[0]] = feats[nb]
        return nx


# --------------------------------------------------------------------------
# replay


@dataclass(slots=True)
class Transition:
    kind: int
    x: np.ndarray
    nx: np.ndarray
    nmask: np.ndarray
    mmask: np.ndarray
    action: int
    reward: float
    next_x: np.ndarray
    next_nx: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.storage: list = []
        self._head = 0

    def __len__(self) -> int:
        return len(self.storage)

    def push(self, t) -> None:
        if len(self.storage) < self.capacity:
            self.storage.append(t)
        else:
            self.storage[self._head] = t
            self._head = (self._head + 1) % self.capacity

    def items(self) -> list:
        """Contents, oldest first."""
        return self.storage[self._head:] + self.storage[: self._head]

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        if len(self.storage) < batch_size:
            raise ValueError(f"cannot sample {batch_size} from a buffer holding {len(self.storage)}")
        idx = rng.integers(0, len(self.storage), size=batch_size)
        return [self.storage[i] for i in idx]


@dataclass
class TransitionBatch:
    kind: int
    x: np.ndarray
    nx: np.ndarray
    nmask: np.ndarray
    mmask: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_x: np.ndarray
    next_nx: np.ndarray
    terminal: np.ndarray

    def current(self) -> Batch:
        return Batch(self.x, self.nx, self.nmask, self.mmask)

    def following(self) -> Batch:
        return Batch(self.next_x, self.next_nx, self.nmask, self.mmask)

    @property
    def size(self) -> int:
        return self.x.shape[0]


def collate(transitions: Sequence[Transition]) -> list[TransitionBatch]:
    """Stack transitions into one batch per phase structure, in first-seen order."""
    groups: dict[int, list[Transition]] = defaultdict(list)
    for t in transitions:
        groups[t.kind].append(t)
    out = []
    for kind, ts in groups.items():
        out.append(TransitionBatch(
            kind=kind,
            x=np.stack([t.x for t in ts]),
            nx=np.stack([t.nx for t in ts]),
            nmask=np.stack([t.nmask for t in ts]),
            mmask=np.stack([t.mmask for t in ts]),
            action=np.array([t.action for t in ts], dtype=np.int64),
            reward=np.array([t.reward for t in ts], dtype=np.float64),
            next_x=np.stack([t.next_x for t in ts]),
            next_nx=np.stack([t.next_nx for t in ts]),
            terminal=np.array([t.terminal for t in ts], dtype=bool),
        ))
    return out


# --------------------------------------------------------------------------
# learning


def select_action(q: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    q = np.asarray(q)
    if q.size == 0:
        raise ValueError("empty Q vector")
    if rng.random() < eps:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def td_targets(batch: TransitionBatch, target_params: ParamStore, gamma: float, structure: PhaseStructure,
               frap_cfg: FrapConfig) -> np.ndarray:
    if set(target_params.shapes()) != set(frap.param_shapes(frap_cfg)) or any(
            target_params[k].shape != s for k, s in frap.param_shapes(frap_cfg).items()):
        raise ValueError("target parameters do not match the network configuration")
    if gamma == 0:
        return batch.reward.copy()
    q_next = frap.q_values(batch.following(), structure, target_params, frap_cfg)
    return np.where(batch.terminal, batch.reward, batch.reward + gamma * q_next.max(axis=1))


def sync_target(params: ParamStore) -> ParamStore:
    return params.copy()


class Adam:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params.tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float = 0.001):
        self.lr = lr
        self.t = 0

    def update(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            params.tensors[name] -= self.lr * g


def make_optimizer(cfg: AgentConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


def train_step(params: ParamStore, target_params: ParamStore, batches: Sequence[TransitionBatch],
               structures: Sequence[PhaseStructure], agent_cfg: AgentConfig, frap_cfg: FrapConfig,
               optimizer) -> float:
    """One gradient update on the mean squared TD error; returns the loss before the update."""
    total = sum(b.size for b in batches)
    grads: dict[str, np.ndarray] = {}
    sq = 0.0
    for b in batches:
        st = structures[b.kind]
        y = td_targets(b, target_params, agent_cfg.gamma, st, frap_cfg)
        q, cache = frap.forward(b.current(), st, params, frap_cfg, keep_cache=True)
        rows = np.arange(b.size)
        err = q[rows, b.action] - y
        sq += float((err * err).sum())
        dq = np.zeros_like(q)
        dq[rows, b.action] = 2.0 * err / total
        for name, g in frap.backward(dq, cache, params).items():
            grads[name] = grads[name] + g if name in grads else g
    loss = sq / total
    if not math.isfinite(loss):
        raise NumericalAbort(f"non-finite TD loss {loss} at parameter version {params.version}")
    norm = frap.global_norm(grads)
    if agent_cfg.grad_clip and norm > agent_cfg.grad_clip:
        scale = agent_cfg.grad_clip / norm
        grads = {k: v * scale for k, v in grads.items()}
    optimizer.update(params, grads)
    params.version += 1
    if not params.all_finite():
        raise NumericalAbort(f"non-finite parameters after update {params.version}")
    return loss


# --------------------------------------------------------------------------
# rollouts


def greedy_actions(params: ParamStore, encoder: Encoder, feats: list[np.ndarray],
                   frap_cfg: FrapConfig) -> list[np.ndarray]:
    """Q-vectors for every intersection from one parameter set."""
    n = len(feats)
    qs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    by_kind: dict[int, list[int]] = defaultdict(list)
    for k in range(n):
        by_kind[encoder.kind[k]].append(k)
    for kind, ks in by_kind.items():
        batch = Batch(
            np.stack([feats[k] for k in ks]),
            np.stack([encoder.neighbor_features(feats, k) for k in ks]),
            encoder.nmask[ks],
            encoder.mmask[ks],
        )
        q = frap.q_values(batch, encoder.structures[kind], params, frap_cfg)
        for row, k in enumerate(ks):
            qs[k] = q[row]
    return qs


class MoveLightController:
    """Greedy (or epsilon-greedy) policy from trained parameters."""

    name = "movelight"

    def __init__(self, params: ParamStore, frap_cfg: FrapConfig, interval_s: int = 10, eps: float = 0.0,
                 seed: int = 0):
        self.params = params
        self.frap_cfg = frap_cfg
        self.interval_s = interval_s
        self.eps = eps
        self.seed = seed
        self.encoder: Encoder | None = None
        self.rng = np.random.default_rng(seed)

    def reset(self, state: SimState) -> None:
        self.encoder = Encoder(state.net, state.compiled.lane_index, self.frap_cfg.max_neighbors)
        self.rng = np.random.default_rng(self.seed)

    def act(self, state: SimState) -> list[int]:
        feats = self.encoder.features(state)
        qs = greedy_actions(self.params, self.encoder, feats, self.frap_cfg)
        return [select_action(q, self.eps, self.rng) for q in qs]


@dataclass
class EpisodeLog:
    episode: int
    seed: int
    metrics: EpisodeMetrics
    mean_reward: float
    mean_loss: float | None
    epsilon: float
    train_steps: int


@dataclass
class TrainingResult:
    params: ParamStore
    episodes: list[EpisodeLog]
    frap_cfg: FrapConfig
    agent_cfg: AgentConfig
    train_steps: int = 0


def episode_seed(seed: int, episode: int) -> int:
    return seed * 100_003 + episode


def run_training(
    net: RoadNetwork,
    flows: FlowSpec,
    agent_cfg: AgentConfig | None = None,
    sim_cfg: SimConfig | None = None,
    frap_cfg: FrapConfig | None = None,
    seed: int = 0,
    on_decision: Callable[[int, int, list[int]], None] | None = None,
    on_episode: Callable[[EpisodeLog], None] | None = None,
) -> TrainingResult:
    """Train one shared network for every intersection.

    ``on_decision(episode, decision, versions)`` receives the parameter
    version each intersection's Q-values came from.
    """
    agent_cfg = agent_cfg or AgentConfig()
    sim_cfg = sim_cfg or SimConfig()
    frap_cfg = frap_cfg or FrapConfig()
    params = frap.init_params(frap_cfg, seed)
    target = sync_target(params)
    optimizer = make_optimizer(agent_cfg)
    buffer = ReplayBuffer(agent_cfg.buffer_size)
    act_rng = np.random.default_rng([seed, 1])
    sample_rng = np.random.default_rng([seed, 2])
    decisions = 0
    train_steps = 0
    logs: list[EpisodeLog] = []
    for ep in range(agent_cfg.episodes):
        ep_seed = episode_seed(seed, ep)
        state = init_sim(net, flows, sim_cfg, ep_seed)
        enc = Encoder(net, state.compiled.lane_index, frap_cfg.max_neighbors)
        n = len(net.intersections)
        acc = MetricsAccumulator()
        prev = None
        actions = list(state.active_phase)
        rewards, losses = [], []
        for t in range(sim_cfg.horizon_steps + 1):
            at_decision = t % sim_cfg.decision_interval_s == 0 or t == sim_cfg.horizon_steps
            if at_decision:
                feats = enc.features(state)
                nxs = [enc.neighbor_features(feats, k) for k in range(n)]
                terminal = t == sim_cfg.horizon_steps
                if prev is not None:
                    pfeats, pnxs, pacts = prev
                    for k in range(n):
                        r = compute_reward(state, k, agent_cfg.reward)
                        rewards.append(r)
                        buffer.push(Transition(enc.kind[k], pfeats[k], pnxs[k], enc.nmask[k], enc.mmask[k],
                                               pacts[k], r, feats[k], nxs[k], terminal))
                if terminal:
                    break
                qs = greedy_actions(params, enc, feats, frap_cfg)
                if on_decision is not None:
                    on_decision(ep, decisions, [params.version] * n)
                eps = epsilon_value(agent_cfg.epsilon, decisions)
                actions = [select_action(q, eps, act_rng) for q in qs]
                prev = (feats, nxs, actions)
                decisions += 1
                if len(buffer) >= agent_cfg.batch_size:
                    sample = buffer.sample(agent_cfg.batch_size, sample_rng)
                    losses.append(train_step(params, target, collate(sample), enc.structures, agent_cfg,
                                             frap_cfg, optimizer))
                    train_steps += 1
                    if train_steps % agent_cfg.target_sync_every == 0:
                        target = sync_target(params)
            step(state, actions)
            record_step(acc, state)
        metrics = finalize(acc, sim_cfg.horizon_steps)
        entry = EpisodeLog(ep, ep_seed, metrics, float(np.mean(rewards)) if rewards else 0.0,
                           float(np.mean(losses)) if losses else None,
                           epsilon_value(agent_cfg.epsilon, decisions), train_steps)
        logs.append(entry)
        log.info("episode %d queue %.2f travel %s loss %s eps %.3f", ep, metrics.avg_queue,
                 metrics.avg_travel_time_s, entry.mean_loss, entry.epsilon)
        if on_episode is not None:
            on_episode(entry)
    return TrainingResult(params, logs, frap_cfg, agent_cfg, train_steps)


# --------------------------------------------------------------------------
# checkpoints


def _config_dict(cfg) -> dict:
    return asdict(cfg)


def save_checkpoint(path: str | Path, params: ParamStore, frap_cfg: FrapConfig, train_steps: int = 0,
                    extra: dict | None = None) -> None:
    meta = {"format": "movelight-checkpoint", "version": CHECKPOINT_VERSION, "train_steps": train_steps,
            "param_version": params.version, "frap_config": _config_dict(frap_cfg), "extra": extra or {}}
    arrays = {f"param__{k}": v for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, FrapConfig, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != "movelight-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        tensors = {k[len("param__"):]: data[k].copy() for k in data.files if k.startswith("param__")}
    cfg = FrapConfig(**meta["frap_config"])
    expected = frap.param_shapes(cfg)
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise ValueError(f"{path}: tensor shapes do not match the stored configuration")
    return ParamStore(tensors, meta["param_version"]), cfg, meta
