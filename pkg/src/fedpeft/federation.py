"""Round loop, local SGD and server-side aggregation."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import peft, vit
from .data import Dataset, Partition, TaskData, balanced_accuracy
from .errors import (AggregationError, ConfigError, FedPeftError, NonFiniteError,
                     NumericalError, ProtocolError, RankError, TrainingError)
from .linalg import low_rank_split
from .peft import ModelState, Payload, PeftConfig, RoundPlan, StrategyId
from .rng import Rng
from .vit import ParamTree, VitConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 6
    rounds: int = 200
    lr: float = 1e-2
    batch_size: int = 32
    local_epochs: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("need at least one client")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds and local epochs must be non-negative")
        if self.batch_size < 1 or self.threads < 1:
            raise ConfigError("batch size and thread count must be positive")


@dataclass(frozen=True)
class FedSetup:
    strategy: StrategyId
    vit: VitConfig
    peft: PeftConfig
    fed: FederationConfig
    seed: int = 0


@dataclass
class ClientState:
    cid: int
    data: Dataset
    model: ModelState
    rng: Rng

    @property
    def num_samples(self) -> int:
        return len(self.data)


@dataclass
class ClientUpdate:
    client_id: int
    payload: Payload
    train_loss: float

    @property
    def num_samples(self):
        return self.payload.num_samples


@dataclass
class RoundRecord:
    t: int
    strategy: str
    client_losses: tuple
    balanced_accuracy: float
    uplink_elements: int
    downlink_elements: int
    uplink_bytes: int
    downlink_bytes: int
    seed: int = 0
    sba_block: int | None = None
    payload_layout: dict = field(default_factory=dict)
    wall_time: float = 0.0


# local training ------------------------------------------------------------

def local_train(setup: FedSetup, client: ClientState, plan: RoundPlan,
                global_payload: Payload | None) -> ClientUpdate:
    """Install the broadcast, run E epochs of mini-batch SGD, pack the result."""
    model = client.model
    if global_payload is not None:
        peft.decode_payload(global_payload, model, setup.strategy)
    paths = peft.trainable_set(setup.strategy, setup.vit, plan, setup.peft)
    arrays = model.arrays()
    n = client.num_samples
    bs = setup.fed.batch_size
    losses = []
    for epoch in range(plan.local_epochs):
        order = client.rng.child("shuffle", plan.t, epoch).permutation(n)
        for i in range(0, n, bs):
            idx = order[i:i + bs]
            try:
                loss = vit.sgd_step(setup.vit, client.data.images[idx], client.data.labels[idx],
                                    model.params, paths, plan.lr,
                                    model.peft.prompts, model.peft.lora)
            except NonFiniteError as exc:
                raise TrainingError(f"client {client.cid} diverged in round {plan.t}",
                                    plan.t, client.cid) from exc
            if not math.isfinite(loss) or not all(np.isfinite(arrays[p]).all() for p in paths):
                raise TrainingError(f"client {client.cid} diverged in round {plan.t}",
                                    plan.t, client.cid)
            losses.append(loss)
    payload = peft.encode_payload(setup.strategy, model, paths, n, setup.peft)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return ClientUpdate(client.cid, payload, mean_loss)


# aggregation ---------------------------------------------------------------

def _payloads(updates):
    return [u.payload if isinstance(u, ClientUpdate) else u for u in updates]


def _check(payloads):
    if not payloads:
        raise ProtocolError("no client updates to aggregate")
    ref = payloads[0]
    for p in payloads[1:]:
        if p.strategy != ref.strategy:
            raise ProtocolError(f"mixed strategies {ref.strategy!r} and {p.strategy!r}")
        if p.tensors.keys() != ref.tensors.keys():
            raise ProtocolError("client payloads carry different tensor sets")
        for k, v in p.tensors.items():
            if v.shape != ref.tensors[k].shape:
                raise ProtocolError(f"{k}: shape {v.shape} != {ref.tensors[k].shape}")
    counts = [p.num_samples for p in payloads]
    if min(counts) < 1:
        raise ProtocolError("every client must report at least one training sample")
    total = sum(counts)
    return [c / total for c in counts]


def _weighted_mean(arrays, weights):
    # anchored on the first client: identical inputs come back bit-identical
    base = arrays[0]
    acc = base.copy()
    for w, a in zip(weights[1:], arrays[1:]):
        acc += w * (a - base)
    return acc


def _is_lora(key):
    return key.startswith("lora/")


def _is_dvpt(key):
    return key.startswith("dvpt/")


def aggregate_fedavg(updates, keys=None) -> Payload:
    """Sample-weighted mean of every raw tensor (LoRA/DVPT factors excluded)."""
    payloads = _payloads(updates)
    weights = _check(payloads)
    ref = payloads[0]
    keys = keys or [k for k in ref.tensors if not (_is_lora(k) or _is_dvpt(k))]
    out = {k: _weighted_mean([p.tensors[k] for p in payloads], weights) for k in keys}
    return Payload(ref.strategy, out, sum(p.num_samples for p in payloads))


def _split_or_raise(matrix, rank, what, mode="balanced"):
    try:
        return low_rank_split(matrix, rank, mode)
    except (NumericalError, RankError) as exc:
        raise AggregationError(f"SVD failed while aggregating {what}: {exc}") from exc


LORA_SPLIT = "left"


def aggregate_lora(updates, split: str = LORA_SPLIT) -> Payload:
    """Average reconstructed B @ A updates, then re-split at the client rank.

    The default split keeps the singular values in B and orthonormal rows in
    A; a balanced split shrinks both factors when the averaged update is
    small, and since each factor's gradient scales with the other, local
    training then stalls.
    """
    payloads = _payloads(updates)
    weights = _check(payloads)
    ref = payloads[0]
    out = {}
    for key in ref.tensors:
        if not (_is_lora(key) and key.endswith("/A")):
            continue
        key_b = key[:-1] + "B"
        deltas = [p.tensors[key_b] @ p.tensors[key] for p in payloads]
        mean = _weighted_mean(deltas, weights)
        rank = ref.tensors[key].shape[0]
        b, a = _split_or_raise(mean, rank, key[:-2], split)
        out[key], out[key_b] = a, b
    return Payload(ref.strategy, out, sum(p.num_samples for p in payloads))


def aggregate_dvpt(updates) -> Payload:
    """Average reconstructed prompts and re-decompose them for the downlink."""
    payloads = _payloads(updates)
    weights = _check(payloads)
    ref = payloads[0]
    out = {}
    for key in ref.tensors:
        if not (_is_dvpt(key) and key.endswith("/A")):
            continue
        key_b = key[:-1] + "B"
        recon = [p.tensors[key] @ p.tensors[key_b] for p in payloads]
        mean = _weighted_mean(recon, weights)
        rank = ref.tensors[key].shape[1]
        left, right = _split_or_raise(mean, rank, key[:-2])
        out[key], out[key_b] = left, right
    return Payload(ref.strategy, out, sum(p.num_samples for p in payloads))


def aggregate(updates) -> Payload:
    """Dispatch each tensor group to its aggregation rule, keeping key order."""
    payloads = _payloads(updates)
    _check(payloads)
    ref = payloads[0]
    parts = {}
    parts.update(aggregate_fedavg(payloads).tensors)
    if any(_is_lora(k) for k in ref.tensors):
        parts.update(aggregate_lora(payloads).tensors)
    if any(_is_dvpt(k) for k in ref.tensors):
        parts.update(aggregate_dvpt(payloads).tensors)
    ordered = {k: parts[k] for k in ref.tensors}
    return Payload(ref.strategy, ordered, sum(p.num_samples for p in payloads))


# scheduling ----------------------------------------------------------------

def sba_schedule(seed: int, rounds: int, depth: int) -> list:
    """Server's block choice for rounds 1..T, uniform on [1, depth]."""
    server = Rng(seed).child("server")
    return [int(server.child("sba", t).integers(1, depth + 1)) for t in range(1, rounds + 1)]


def make_plan(setup: FedSetup, t: int) -> RoundPlan:
    block = None
    if peft.needs_block(setup.strategy):
        block = int(Rng(setup.seed).child("server").child("sba", t).integers(1, setup.vit.depth + 1))
    return RoundPlan(t=t, sba_block=block, lr=setup.fed.lr, local_epochs=setup.fed.local_epochs)


# driver --------------------------------------------------------------------

def evaluate(setup: FedSetup, model: ModelState, test: Dataset) -> float:
    preds = model.predict(setup.vit, test.images)
    return balanced_accuracy(preds, test.labels, setup.vit.num_classes)


class Federation:
    """One server and its clients for a single (strategy, seed) run."""

    def __init__(self, setup: FedSetup, task: TaskData, part: Partition, base: ParamTree):
        self.setup = setup
        self.task = task
        root = Rng(setup.seed)
        server = root.child("server")
        params = vit.attach_head(base, setup.vit.num_classes, server)
        state = peft.init_strategy(setup.strategy, setup.vit, setup.peft,
                                   server.child("peft"), params)
        self.global_model = ModelState(params, state)
        self.clients = [
            ClientState(c, task.train.subset(ix), self.global_model.copy(), root.child("client", c))
            for c, ix in enumerate(part.indices)
        ]
        self.exchanging = peft.exchanges(setup.strategy)
        self.global_payload = None
        if self.exchanging and setup.fed.rounds:
            # initial broadcast of the round-1 trainable set; for DVPT this
            # already projects the prompts onto rank r_v everywhere
            plan = make_plan(setup, 1)
            paths = peft.trainable_set(setup.strategy, setup.vit, plan, setup.peft)
            self.global_payload = peft.encode_payload(setup.strategy, self.global_model, paths,
                                                      0, setup.peft)
            peft.decode_payload(self.global_payload, self.global_model)

    def _train_all(self, plan):
        payload = self.global_payload

        def work(client):
            return local_train(self.setup, client, plan, payload)

        threads = min(self.setup.fed.threads, len(self.clients))
        if threads <= 1:
            return [work(c) for c in self.clients]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, self.clients))

    def evaluate(self) -> float:
        if self.exchanging:
            return evaluate(self.setup, self.global_model, self.task.test)
        return float(np.mean([evaluate(self.setup, c.model, self.task.test) for c in self.clients]))

    def step(self, t: int) -> RoundRecord:
        start = time.perf_counter()
        plan = make_plan(self.setup, t)
        updates = self._train_all(plan)
        up = down = 0
        layout = {}
        if self.exchanging:
            agg = aggregate(updates)
            peft.decode_payload(agg, self.global_model)
            self.global_payload = agg
            up = sum(u.payload.num_elements for u in updates)
            down = len(self.clients) * agg.num_elements
            layout = updates[0].payload.layout()
        acc = self.evaluate()
        return RoundRecord(
            t=t, strategy=str(self.setup.strategy),
            client_losses=tuple(u.train_loss for u in updates),
            balanced_accuracy=acc,
            uplink_elements=up, downlink_elements=down,
            uplink_bytes=8 * up, downlink_bytes=8 * down,
            seed=self.setup.seed, sba_block=plan.sba_block, payload_layout=layout,
            wall_time=time.perf_counter() - start,
        )

    def run(self) -> list:
        records = []
        for t in range(1, self.setup.fed.rounds + 1):
            try:
                records.append(self.step(t))
            except FedPeftError as exc:
                exc.partial_records = records
                raise
            log.debug("%s seed=%d round %d acc=%.4f", self.setup.strategy, self.setup.seed,
                      t, records[-1].balanced_accuracy)
        return records


def run_federation(setup: FedSetup, task: TaskData, part: Partition, base: ParamTree) -> list:
    """Full broadcast -> local train -> aggregate -> evaluate loop."""
    if len(part.indices) != setup.fed.num_clients:
        raise ConfigError(f"partition has {len(part.indices)} clients, config says {setup.fed.num_clients}")
    return Federation(setup, task, part, base).run()


@dataclass
class WarmStartResult:
    warm: list
    cold: list
    warm_base: ParamTree
    holdout: int


def drop_client(part: Partition, holdout: int) -> Partition:
    keep = [ix for c, ix in enumerate(part.indices) if c != holdout]
    hist = np.delete(part.histograms, holdout, axis=0)
    return Partition(keep, hist, part.mode, part.beta, part.weights)


def warm_start_base(setup: FedSetup, task: TaskData, part: Partition, base: ParamTree,
                    holdout: int, epochs: int, lr: float) -> ParamTree:
    """Fully fine-tune on the held-out client's data, then discard the head."""
    rng = Rng(setup.seed).child("warm_start")
    params = vit.attach_head(base, setup.vit.num_classes, rng.child("head"))
    local = task.train.subset(part.indices[holdout])
    tuned = vit.pretrain_desk(setup.vit, params, local, epochs, rng.child("sgd"),
                              lr=lr, batch_size=setup.fed.batch_size)
    return vit.reset_head(tuned, rng.child("discard"))


def run_warm_start_scenario(setup: FedSetup, task: TaskData, part: Partition, base: ParamTree,
                            holdout: int, epochs: int = 5, lr: float = 1e-2) -> WarmStartResult:
    """Federate the remaining clients from a warm-started and from the original base."""
    if not 0 <= holdout < len(part.indices):
        raise ConfigError(f"held-out client {holdout} does not exist")
    warm_base = warm_start_base(setup, task, part, base, holdout, epochs, lr)
    rest = drop_client(part, holdout)
    fed = FederationConfig(**{**setup.fed.__dict__, "num_clients": len(rest.indices)})
    sub = FedSetup(setup.strategy, setup.vit, setup.peft, fed, setup.seed)
    warm = run_federation(sub, task, rest, warm_base)
    cold = run_federation(sub, task, rest, base)
    return WarmStartResult(warm, cold, warm_base, holdout)
