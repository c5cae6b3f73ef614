"""
federation.py: Federated round engine for binary networks

Each global iteration:
  1. local training   - every client trains one epoch on its shard
  2. upload           - participants send W̄ (real strategies) or W^b (binary), plus ϑ
  3. aggregation      - dataset-size weighted mean, client-id order
  4. download/update  - clients merge the broadcast per strategy, then re-binarize

Strategies:
  FA-real         real-valued network, W̄ exchanged
  BiFL-Full       binary network, W̄ and ϑ exchanged
  BiFL-Bi-UpOnly  W^b uploaded, W̃ broadcast, W̄ <- β·Sign(W̃) + (1−β)·W̄
  BiFL-Bi-UpDown  same merge, but Sign(W̃) broadcast
  BiFL-BiML       W^b uploaded, W̃ broadcast, W̄ <- clip(α·μ̂) (ML-PU)
  hybrid          BiML for rounds t <= T, FA-real afterwards

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from binary_net import Model, TrainConfig, sign_binarize, train_epoch
from data import Dataset, Partition
from errors import ConfigError, ShapeError
from mlpu import (
    DEFAULT_ALPHA,
    CurveFitCache,
    EstimatorStats,
    MlpuEstimator,
    count_positive,
)

logger = logging.getLogger(__name__)


# ============================================================
# Strategy
# ============================================================

StrategyKind = Literal["FA-real", "BiFL-Full", "BiFL-Bi-UpOnly", "BiFL-Bi-UpDown", "BiFL-BiML"]

FA_REAL = "FA-real"
FULL = "BiFL-Full"
UP_ONLY = "BiFL-Bi-UpOnly"
UP_DOWN = "BiFL-Bi-UpDown"
BIML = "BiFL-BiML"

MIXING_KINDS = {UP_ONLY, UP_DOWN}
BINARY_UPLOAD_KINDS = {UP_ONLY, UP_DOWN, BIML}
FLOAT_BITS = 32


class StrategyConfig(BaseModel):
    """Exchange strategy and its hyperparameters."""
    kind: StrategyKind
    beta: Optional[float] = Field(None, ge=0, le=1)
    alpha: Optional[float] = None
    hybrid_switch_epoch: Optional[int] = Field(None, ge=0)
    estimator: Literal["curve", "exact"] = "curve"

    @model_validator(mode="after")
    def _check_parameters(self) -> "StrategyConfig":
        if (self.beta is not None) != (self.kind in MIXING_KINDS):
            raise ValueError(f"beta is required for {sorted(MIXING_KINDS)} and only for them "
                             f"(kind={self.kind})")
        if (self.alpha is not None) != (self.kind == BIML):
            raise ValueError(f"alpha is required for {BIML} and only for it (kind={self.kind})")
        if self.alpha is not None and self.alpha <= 1:
            raise ValueError("alpha must be > 1")
        if self.hybrid_switch_epoch is not None and self.kind != BIML:
            raise ValueError("hybrid switching starts from BiFL-BiML")
        return self

    @property
    def label(self) -> str:
        if self.hybrid_switch_epoch is not None:
            return f"hybrid-T{self.hybrid_switch_epoch}"
        return self.kind


def make_strategy(**kwargs) -> StrategyConfig:
    """StrategyConfig with pydantic errors turned into ConfigError."""
    try:
        return StrategyConfig(**kwargs)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        raise ConfigError(err["msg"], field="strategy" + (f".{loc}" if loc else "")) from exc


def hybrid_controller(t: int, T: Optional[int]) -> str:
    """BiML for rounds t <= T, FA-real afterwards (rounds count from 1)."""
    if T is None or t <= T:
        return BIML
    return FA_REAL


def effective_kind(strategy: StrategyConfig, t: int) -> str:
    if strategy.hybrid_switch_epoch is None:
        return strategy.kind
    return hybrid_controller(t, strategy.hybrid_switch_epoch)


# ============================================================
# State
# ============================================================

@dataclass
class ClientState:
    client_id: int
    model: Model
    shard: np.ndarray
    virtual_M: float
    rng: np.random.Generator

    @property
    def shard_size(self) -> int:
        return len(self.shard)


@dataclass
class ServerState:
    """Last aggregate per weight layer (W for real exchange, W̃ for binary)."""
    aggregate: List[np.ndarray] = field(default_factory=list)
    amplitudes: List[float] = field(default_factory=list)
    round_index: int = 0
    participation_rate: float = 1.0
    participants: List[int] = field(default_factory=list)


@dataclass
class CommLedger:
    """Bits per round and cumulative totals."""
    uplink: List[int] = field(default_factory=list)
    downlink: List[int] = field(default_factory=list)

    @property
    def uplink_total(self) -> int:
        return int(sum(self.uplink))

    @property
    def downlink_total(self) -> int:
        return int(sum(self.downlink))

    def charge(self, up: int, down: int) -> None:
        self.uplink.append(int(up))
        self.downlink.append(int(down))


@dataclass
class RoundResult:
    round_index: int
    strategy: str
    test_accuracy: float
    test_loss: float
    train_loss: float
    uplink_bits: int
    downlink_bits: int
    uplink_bits_cum: int
    downlink_bits_cum: int
    participants: List[int]
    estimator: EstimatorStats = field(default_factory=EstimatorStats)


@dataclass
class RoundContext:
    """Everything a round needs besides clients, server and strategy."""
    train: Dataset
    test: Dataset
    train_cfg: TrainConfig
    rng: np.random.Generator
    ledger: CommLedger
    estimator: Optional[MlpuEstimator] = None
    equal_shards: bool = True
    eval_clients: Optional[int] = None
    workers: int = 1


# ============================================================
# Aggregation / client updates
# ============================================================

def aggregate_weighted_mean(uploads: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    """(1/|D|)·Σ |D_i|·W^i, accumulated in the given order.

    Equal sizes reduce to the plain arithmetic mean, so binary uploads land
    exactly on the (2k − M)/M lattice.
    """
    if not uploads:
        raise ShapeError("nothing to aggregate")
    if len(uploads) != len(sizes):
        raise ShapeError(f"{len(uploads)} uploads but {len(sizes)} sizes")
    shape = np.shape(uploads[0])
    if any(size < 1 for size in sizes):
        raise ShapeError(f"shard sizes must be >= 1, got {list(sizes)}")
    equal = len(set(sizes)) == 1
    total = np.zeros(shape)
    for upload, size in zip(uploads, sizes):
        if np.shape(upload) != shape:
            raise ShapeError(f"upload of shape {np.shape(upload)} does not match {shape}")
        upload = np.asarray(upload, dtype=np.float64)
        total += upload if equal else size * upload
    return total / float(len(sizes) if equal else sum(sizes))


def update_full(client: ClientState, W: Sequence[np.ndarray], amplitudes: Sequence[float]) -> None:
    """W̄ <- W, W^b <- Sign(W), ϑ <- ϑ̃."""
    for layer, w, amp in zip(client.model.weight_layers, W, amplitudes):
        layer.w_aux = np.array(w, dtype=np.float64)
        layer.amplitude = float(amp)
        layer.clip_and_binarize()
    client.model.version += 1


def update_real(client: ClientState, W: Sequence[np.ndarray]) -> None:
    """FA-real download: W̄ <- W (no clip, ϑ untouched)."""
    for layer, w in zip(client.model.weight_layers, W):
        layer.w_aux = np.array(w, dtype=np.float64)
        layer.w_bin = sign_binarize(layer.w_aux)
    client.model.version += 1


def update_mix(client: ClientState, W_tilde: Sequence[np.ndarray], beta: float,
               amplitudes: Optional[Sequence[float]] = None) -> None:
    """W̄ <- β·Sign(W̃) + (1−β)·W̄, then re-binarize."""
    if beta is None or not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must be in [0, 1], got {beta}", field="strategy.beta")
    layers = client.model.weight_layers
    for i, (layer, w_tilde) in enumerate(zip(layers, W_tilde)):
        layer.w_aux = beta * sign_binarize(w_tilde) + (1.0 - beta) * layer.w_aux
        if amplitudes is not None:
            layer.amplitude = float(amplitudes[i])
        layer.clip_and_binarize()
    client.model.version += 1


def update_biml(client: ClientState, W_tilde: Sequence[np.ndarray], estimator: MlpuEstimator,
                M: float, own_vote: bool, amplitudes: Optional[Sequence[float]] = None,
                lattice: bool = False, stats: Optional[EstimatorStats] = None) -> EstimatorStats:
    """Per parameter: M_P from count_positive(w̃, M), then the ML-PU update.

    `lattice` rounds M_P to the nearest integer (equal shards, where the
    tally is known to be integral).
    """
    stats = stats if stats is not None else EstimatorStats()
    for i, (layer, w_tilde) in enumerate(zip(client.model.weight_layers, W_tilde)):
        m_p = None
        if M >= 2:
            m_p = count_positive(w_tilde, M)
            if lattice:
                m_p = np.rint(m_p)
        layer.w_aux = estimator.update(layer.w_aux, w_tilde, M, own_vote=own_vote,
                                       stats=stats, M_P=m_p)
        if amplitudes is not None:
            layer.amplitude = float(amplitudes[i])
        layer.clip_and_binarize()
    client.model.version += 1
    return stats


def select_participants(clients: Sequence[ClientState], participation: float,
                        rng: np.random.Generator) -> List[ClientState]:
    """Uniform ⌊λM⌋-subset (at least one client), in client-id order."""
    if not 0.0 < participation <= 1.0:
        raise ConfigError(f"must be in (0, 1], got {participation}", field="participation")
    M = len(clients)
    k = max(1, math.floor(participation * M))
    if k >= M:
        return list(clients)
    picked = np.sort(rng.choice(M, size=k, replace=False))
    return [clients[i] for i in picked]


# ============================================================
# Ledger
# ============================================================

def ledger_charge(kind: str, N: int, L: int, M: int, participants: int,
                  equal_shards: bool = True) -> Tuple[int, int]:
    """(uplink bits summed over participants, downlink bits of one broadcast)."""
    if not 1 <= participants <= M:
        raise ConfigError(f"participants must be in [1, {M}], got {participants}")
    if kind == FA_REAL:
        per_client, down = FLOAT_BITS * N, FLOAT_BITS * N
    elif kind == FULL:
        per_client = down = FLOAT_BITS * N + FLOAT_BITS * L
    elif kind == UP_DOWN:
        per_client, down = N + FLOAT_BITS * L, N + FLOAT_BITS * L
    elif kind in (UP_ONLY, BIML):
        per_client = N + FLOAT_BITS * L
        if equal_shards:
            down = math.ceil(math.log2(participants + 1)) * N + FLOAT_BITS * L
        else:
            down = FLOAT_BITS * N + FLOAT_BITS * L
    else:
        raise ConfigError(f"unknown strategy '{kind}'", field="strategy.kind")
    return participants * per_client, down


# ============================================================
# Round engine
# ============================================================

def _train_client(client: ClientState, ctx: RoundContext, epoch: int) -> float:
    shard = client.shard
    return train_epoch(client.model, ctx.train.images[shard], ctx.train.labels[shard],
                       ctx.train_cfg, epoch, client.rng)


def _switch_to_real(clients: Sequence[ClientState]) -> None:
    for c in clients:
        if c.model.binarized:
            c.model.set_binarized(False)


def evaluate_clients(clients: Sequence[ClientState], test: Dataset,
                     limit: Optional[int] = None) -> Tuple[float, float]:
    """Mean (accuracy, loss) of client models on the test set, inference mode."""
    chosen = clients if limit is None else clients[:limit]
    scores = [c.model.evaluate(test.images, test.labels) for c in chosen]
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))


def run_round(clients: List[ClientState], server: ServerState, strategy: StrategyConfig,
              ctx: RoundContext) -> RoundResult:
    """One global iteration; mutates clients, server and the ledger."""
    t = server.round_index + 1
    kind = effective_kind(strategy, t)
    if kind == FA_REAL:
        if any(c.model.binarized for c in clients):
            logger.info(f"round {t}: switching to real-valued FA exchange")
        _switch_to_real(clients)
    if kind in MIXING_KINDS and strategy.beta is None:
        raise ConfigError(f"{kind} needs beta", field="strategy.beta")
    if kind == BIML and ctx.estimator is None:
        raise ConfigError("BiFL-BiML needs an ML-PU estimator", field="strategy.alpha")

    # 1. local training
    epoch = t - 1
    if ctx.workers > 1:
        with ThreadPoolExecutor(max_workers=ctx.workers) as pool:
            losses = list(pool.map(lambda c: _train_client(c, ctx, epoch), clients))
    else:
        losses = [_train_client(c, ctx, epoch) for c in clients]

    # 2-3. upload and aggregate
    participants = select_participants(clients, server.participation_rate, ctx.rng)
    sizes = [p.shard_size for p in participants]
    n_layers = clients[0].model.num_weight_layers
    uploads = []
    for li in range(n_layers):
        if kind in (FA_REAL, FULL):
            uploads.append([p.model.weight_layers[li].w_aux for p in participants])
        else:
            uploads.append([p.model.weight_layers[li].w_bin for p in participants])
    server.aggregate = [aggregate_weighted_mean(u, sizes) for u in uploads]
    if kind != FA_REAL:
        server.amplitudes = [
            float(aggregate_weighted_mean([np.array(p.model.weight_layers[li].amplitude)
                                           for p in participants], sizes))
            for li in range(n_layers)
        ]
    server.round_index = t
    server.participants = [p.client_id for p in participants]

    # 4. download and update
    stats = EstimatorStats()
    voted = set(server.participants)
    mass = float(sum(sizes))
    for c in clients:
        if kind == FA_REAL:
            update_real(c, server.aggregate)
        elif kind == FULL:
            update_full(c, server.aggregate, server.amplitudes)
        elif kind == UP_ONLY:
            update_mix(c, server.aggregate, strategy.beta, server.amplitudes)
        elif kind == UP_DOWN:
            broadcast = [sign_binarize(w) for w in server.aggregate]
            update_mix(c, broadcast, strategy.beta, server.amplitudes)
        else:
            M_c = mass / c.shard_size
            update_biml(c, server.aggregate, ctx.estimator, M_c, c.client_id in voted,
                        server.amplitudes, lattice=ctx.equal_shards, stats=stats)
    if stats.fallbacks:
        logger.warning(f"round {t}: {stats.fallbacks} estimates fell back to solve_u")

    # ledger + evaluation
    model = clients[0].model
    up, down = ledger_charge(kind, model.num_weight_params, model.num_weight_layers,
                             len(clients), len(participants), ctx.equal_shards)
    ctx.ledger.charge(up, down)
    acc, loss = evaluate_clients(clients, ctx.test, ctx.eval_clients)
    result = RoundResult(
        round_index=t, strategy=kind, test_accuracy=acc, test_loss=loss,
        train_loss=float(np.nanmean(losses)) if losses else float("nan"),
        uplink_bits=up, downlink_bits=down,
        uplink_bits_cum=ctx.ledger.uplink_total, downlink_bits_cum=ctx.ledger.downlink_total,
        participants=server.participants, estimator=stats,
    )
    logger.debug(f"round {t} [{kind}] acc={acc:.4f} loss={loss:.4f} up={up} down={down}")
    return result


# ============================================================
# Federation
# ============================================================

class Federation:
    """Clients, server and ledger for one seeded run.

    Usage:
        fed = Federation.create(model_specs, train, test, partition, strategy,
                                TrainConfig(), participation=1.0, seed=0)
        results = fed.run(rounds=60)
    """

    def __init__(self, clients: List[ClientState], server: ServerState, strategy: StrategyConfig,
                 ctx: RoundContext):
        self.clients = clients
        self.server = server
        self.strategy = strategy
        self.ctx = ctx
        self.history: List[RoundResult] = []

    @classmethod
    def create(cls, model_specs, train: Dataset, test: Dataset, partition: Partition,
               strategy: StrategyConfig, train_cfg: TrainConfig, participation: float = 1.0,
               seed: int = 0, fit_cache: Optional[CurveFitCache] = None,
               eval_clients: Optional[int] = None, workers: int = 1) -> "Federation":
        seq = np.random.SeedSequence(seed)
        model_seq, server_seq, client_seq = seq.spawn(3)
        base = Model.build(model_specs, rng=np.random.default_rng(model_seq))
        if strategy.kind == FA_REAL:
            base.set_binarized(False)
        client_rngs = [np.random.default_rng(s) for s in client_seq.spawn(partition.num_clients)]
        clients = [
            ClientState(i, copy.deepcopy(base), shard, partition.virtual_M(i), client_rngs[i])
            for i, shard in enumerate(partition.shards)
        ]
        estimator = None
        if strategy.kind == BIML:
            estimator = MlpuEstimator(alpha=strategy.alpha or DEFAULT_ALPHA, mode=strategy.estimator,
                                      cache=fit_cache)
        ctx = RoundContext(train=train, test=test, train_cfg=train_cfg,
                           rng=np.random.default_rng(server_seq), ledger=CommLedger(),
                           estimator=estimator, equal_shards=partition.equal_sizes,
                           eval_clients=eval_clients, workers=workers)
        server = ServerState(participation_rate=participation)
        logger.info(f"federation: {len(clients)} clients, strategy={strategy.label}, "
                    f"N={base.num_weight_params}, L={base.num_weight_layers}")
        return cls(clients, server, strategy, ctx)

    @property
    def ledger(self) -> CommLedger:
        return self.ctx.ledger

    def step(self) -> RoundResult:
        result = run_round(self.clients, self.server, self.strategy, self.ctx)
        self.history.append(result)
        return result

    def run(self, rounds: int) -> List[RoundResult]:
        for _ in range(rounds):
            r = self.step()
            logger.info(f"round {r.round_index}/{rounds} [{r.strategy}] "
                        f"acc={r.test_accuracy:.4f} up_cum={r.uplink_bits_cum}")
        return self.history
