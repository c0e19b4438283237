"""PEFT strategies: trainable sets, state initialisation and exchange payloads."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import vit
from .errors import ConfigError, ContractError, ProtocolError
from .linalg import low_rank_split
from .rng import Rng
from .vit import HEAD_PATHS, LoraBank, ParamTree, PromptBank, VitConfig


class StrategyId(str, enum.Enum):
    FULL_FT = "fullft"
    LINEAR_PROBE = "linear_probe"
    ABA = "aba"
    SBA = "sba"
    VPT = "vpt"
    DVPT = "dvpt"
    LORA = "lora"
    ABA_VPT = "aba+vpt"
    SBA_VPT = "sba+vpt"
    LORA_VPT = "lora+vpt"
    LORA_DVPT = "lora+dvpt"
    LOCAL = "local"

    def __str__(self):
        return self.value


# components each strategy trains; "head" is implied everywhere
COMPONENTS = {
    StrategyId.FULL_FT: {"full"},
    StrategyId.LINEAR_PROBE: set(),
    StrategyId.ABA: {"aba"},
    StrategyId.SBA: {"sba"},
    StrategyId.VPT: {"vpt"},
    StrategyId.DVPT: {"dvpt"},
    StrategyId.LORA: {"lora"},
    StrategyId.ABA_VPT: {"aba", "vpt"},
    StrategyId.SBA_VPT: {"sba", "vpt"},
    StrategyId.LORA_VPT: {"lora", "vpt"},
    StrategyId.LORA_DVPT: {"lora", "dvpt"},
    StrategyId.LOCAL: {"full"},
}

DISPLAY_NAMES = {
    StrategyId.FULL_FT: "Full Fine-tuning",
    StrategyId.ABA_VPT: "ABA + VPT",
    StrategyId.ABA: "ABA",
    StrategyId.SBA_VPT: "SBA + VPT",
    StrategyId.SBA: "SBA",
    StrategyId.LORA_VPT: "LoRA + VPT",
    StrategyId.VPT: "VPT",
    StrategyId.LORA_DVPT: "LoRA + DVPT",
    StrategyId.DVPT: "DVPT",
    StrategyId.LORA: "LoRA",
    StrategyId.LINEAR_PROBE: "Linear Probing",
    StrategyId.LOCAL: "Local",
}

_ALIASES = {
    "full": StrategyId.FULL_FT, "full_ft": StrategyId.FULL_FT, "fullft": StrategyId.FULL_FT,
    "linear": StrategyId.LINEAR_PROBE, "linearprobe": StrategyId.LINEAR_PROBE,
    "linear_probe": StrategyId.LINEAR_PROBE, "lp": StrategyId.LINEAR_PROBE,
    "dvpt_only": StrategyId.DVPT,
}


def parse_strategy(name) -> StrategyId:
    """Resolve a strategy name such as ``"LoRA+VPT"``; rejects invalid hybrids."""
    if isinstance(name, StrategyId):
        return name
    key = str(name).strip().lower().replace(" ", "")
    if key in _ALIASES:
        return _ALIASES[key]
    try:
        return StrategyId(key)
    except ValueError:
        pass
    parts = set(key.split("+"))
    if "lora" in parts and parts & {"aba", "sba"}:
        raise ConfigError(f"{name!r}: LoRA cannot be combined with attention fine-tuning")
    for sid, comps in COMPONENTS.items():
        if sid is not StrategyId.LOCAL and comps == parts:
            return sid
    raise ConfigError(f"unknown strategy {name!r}")


@dataclass(frozen=True)
class PeftConfig:
    num_prompts: int = 50
    prompt_rank: int = 8
    lora_rank: int = 4
    lora_alpha: float = 2.0
    lora_init: str = "normal"  # normal | xavier | kaiming | pretrained
    lora_init_std: float = 0.1
    dvpt_mode: str = "per_block"  # per_block | global

    def __post_init__(self):
        if self.num_prompts < 0:
            raise ConfigError("num_prompts must be >= 0")
        if self.lora_rank < 1 or self.prompt_rank < 1:
            raise ConfigError("ranks must be >= 1")
        if self.lora_init not in LORA_INITS:
            raise ConfigError(f"unknown LoRA initialiser {self.lora_init!r}")
        if self.dvpt_mode not in ("per_block", "global"):
            raise ConfigError(f"unknown DVPT mode {self.dvpt_mode!r}")


LORA_INITS = ("normal", "xavier", "kaiming", "pretrained")

# initializer x std cells of the LoRA initialisation sweep
LORA_INIT_GRID = (
    ("xavier", None),
    ("kaiming", None),
    ("pretrained", None),
    ("normal", 0.5),
    ("normal", 0.1),
)


@dataclass
class PeftState:
    prompts: PromptBank | None = None
    lora: LoraBank | None = None

    def tensors(self) -> dict:
        out = {}
        if self.prompts is not None:
            out.update(self.prompts.tensors)
        if self.lora is not None:
            out.update(self.lora.tensors)
        return out

    def copy(self):
        return PeftState(self.prompts.copy() if self.prompts else None,
                         self.lora.copy() if self.lora else None)


@dataclass
class ModelState:
    """Everything one party holds: backbone + head plus PEFT banks."""

    params: ParamTree
    peft: PeftState = field(default_factory=PeftState)

    def arrays(self) -> dict:
        out = dict(self.params)
        out.update(self.peft.tensors())
        return out

    def copy(self):
        return ModelState(self.params.copy(), self.peft.copy())

    def forward(self, cfg, x, leaves=None):
        return vit.forward(cfg, x, self.params, self.peft.prompts, self.peft.lora, leaves)

    def predict(self, cfg, x):
        return vit.predict(cfg, x, self.params, self.peft.prompts, self.peft.lora)


def uses(strategy, component) -> bool:
    return component in COMPONENTS[parse_strategy(strategy)]


def needs_block(strategy) -> bool:
    return uses(strategy, "sba")


def exchanges(strategy) -> bool:
    return parse_strategy(strategy) is not StrategyId.LOCAL


# initialisation ------------------------------------------------------------

def _lora_factor(kind, std, rank, dim, rng, weight=None):
    if kind == "normal":
        return rng.normal(0.0, std, (rank, dim))
    if kind == "xavier":
        bound = math.sqrt(6.0 / (rank + dim))
        return rng.uniform(-bound, bound, (rank, dim))
    if kind == "kaiming":
        return rng.normal(0.0, math.sqrt(2.0 / dim), (rank, dim))
    if kind == "pretrained":
        if weight is None:
            raise ConfigError("pretrained LoRA init needs the frozen projection weights")
        # leading right-singular directions of the frozen (out x in) weight
        _, a = low_rank_split(weight.T, rank)
        return a.copy()
    raise ConfigError(f"unknown LoRA initialiser {kind!r}")


def init_strategy(strategy, cfg: VitConfig, peft_cfg: PeftConfig, rng: Rng,
                  params: ParamTree | None = None) -> PeftState:
    """PEFT banks for ``strategy``: prompts ~ U(-v, v), LoRA A drawn, LoRA B = 0."""
    sid = parse_strategy(strategy)
    comps = COMPONENTS[sid]
    state = PeftState()
    if comps & {"vpt", "dvpt"}:
        r, d = peft_cfg.num_prompts, cfg.dim
        if "dvpt" in comps:
            limit = r * (cfg.depth if peft_cfg.dvpt_mode == "global" else 1)
            if peft_cfg.prompt_rank > min(limit, d):
                raise ConfigError(f"prompt rank {peft_cfg.prompt_rank} exceeds prompt matrix size")
        bound = math.sqrt(6.0 / (d + r)) if r else 0.0
        tensors = {}
        if r:
            for l in range(1, cfg.depth + 1):
                tensors[vit.prompt_path(l)] = rng.child("prompt", l).uniform(-bound, bound, (r, d))
        state.prompts = PromptBank(r, tensors)
    if "lora" in comps:
        if peft_cfg.lora_rank > cfg.dim:
            raise ConfigError("LoRA rank exceeds embedding dimension")
        tensors = {}
        for l in range(1, cfg.depth + 1):
            for proj in "QV":
                pa, pb = vit.lora_paths(l, proj)
                weight = None if params is None else params[f"block/{l}/attn/W_{proj}"]
                tensors[pa] = _lora_factor(peft_cfg.lora_init, peft_cfg.lora_init_std,
                                           peft_cfg.lora_rank, cfg.dim,
                                           rng.child("lora", l, proj), weight)
                tensors[pb] = np.zeros((cfg.dim, peft_cfg.lora_rank))
        state.lora = LoraBank(peft_cfg.lora_rank, float(peft_cfg.lora_alpha), tensors)
    return state


# trainable sets ------------------------------------------------------------

@dataclass(frozen=True)
class RoundPlan:
    t: int
    sba_block: int | None = None
    lr: float = 1e-2
    local_epochs: int = 1


def trainable_set(strategy, cfg: VitConfig, plan: RoundPlan | None = None,
                  peft_cfg: PeftConfig | None = None) -> tuple:
    """Ordered paths updated by ``strategy`` in the round described by ``plan``."""
    sid = parse_strategy(strategy)
    comps = COMPONENTS[sid]
    peft_cfg = peft_cfg or PeftConfig()
    paths = []
    if "full" in comps:
        paths += vit.backbone_paths(cfg)
    if "aba" in comps:
        for l in range(1, cfg.depth + 1):
            paths += vit.attn_paths(l)
    if "sba" in comps:
        block = None if plan is None else plan.sba_block
        if block is None:
            raise ContractError(f"{sid} needs a server-selected block in the round plan")
        if not 1 <= block <= cfg.depth:
            raise ContractError(f"selected block {block} outside [1, {cfg.depth}]")
        paths += vit.attn_paths(block)
    if comps & {"vpt", "dvpt"} and peft_cfg.num_prompts:
        paths += [vit.prompt_path(l) for l in range(1, cfg.depth + 1)]
    if "lora" in comps:
        for l in range(1, cfg.depth + 1):
            for proj in "QV":
                paths += list(vit.lora_paths(l, proj))
    paths += list(HEAD_PATHS)
    return tuple(paths)


# payloads ------------------------------------------------------------------

@dataclass
class Payload:
    """Tensors exchanged in one direction for one party.

    Keys are tree paths for raw tensors and LoRA factors; decomposed prompts
    travel as ``dvpt/<block>/A`` (R x r_v) and ``dvpt/<block>/B`` (r_v x d),
    or ``dvpt/all/{A,B}`` when all blocks are stacked into one matrix.
    """

    strategy: str
    tensors: dict
    num_samples: int = 0

    @property
    def num_elements(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    @property
    def num_bytes(self) -> int:
        return 8 * self.num_elements

    def layout(self) -> dict:
        return {k: int(v.size) for k, v in self.tensors.items()}

    def copy(self):
        return Payload(self.strategy, {k: v.copy() for k, v in self.tensors.items()},
                       self.num_samples)


def _prompt_blocks(paths):
    return [p for p in paths if p.startswith("prompt/")]


def encode_payload(strategy, state: ModelState, paths, num_samples: int,
                   peft_cfg: PeftConfig | None = None) -> Payload:
    """Pack the trainable tensors of ``state``; DVPT prompts are factorised."""
    sid = parse_strategy(strategy)
    peft_cfg = peft_cfg or PeftConfig()
    arrays = state.arrays()
    out = {}
    decompose = uses(sid, "dvpt")
    prompts = _prompt_blocks(paths) if decompose else []
    for p in paths:
        if p in prompts:
            continue
        out[p] = arrays[p].copy()
    if prompts:
        k = peft_cfg.prompt_rank
        if peft_cfg.dvpt_mode == "global":
            stacked = np.concatenate([arrays[p] for p in prompts], axis=0)
            left, right = low_rank_split(stacked, k)
            out["dvpt/all/A"], out["dvpt/all/B"] = left, right
        else:
            for p in prompts:
                block = p.split("/")[1]
                left, right = low_rank_split(arrays[p], k)
                out[f"dvpt/{block}/A"], out[f"dvpt/{block}/B"] = left, right
    return Payload(str(sid), out, int(num_samples))


def decode_payload(payload: Payload, state: ModelState, strategy=None) -> None:
    """Write ``payload`` into ``state`` in place."""
    if strategy is not None and str(parse_strategy(strategy)) != payload.strategy:
        raise ProtocolError(f"payload for {payload.strategy!r} sent to a {parse_strategy(strategy)} receiver")
    arrays = state.arrays()

    def put(path, value):
        if path not in arrays:
            raise ProtocolError(f"receiver has no tensor at {path!r}")
        if arrays[path].shape != value.shape:
            raise ProtocolError(f"{path}: shape {value.shape} != {arrays[path].shape}")
        arrays[path][...] = value

    dvpt = {}
    for key, value in payload.tensors.items():
        if key.startswith("dvpt/"):
            dvpt[key] = value
        else:
            put(key, value)
    if not dvpt:
        return
    if "dvpt/all/A" in dvpt:
        full = dvpt["dvpt/all/A"] @ dvpt["dvpt/all/B"]
        prompts = sorted((p for p in arrays if p.startswith("prompt/")),
                         key=lambda p: int(p.split("/")[1]))
        r = arrays[prompts[0]].shape[0] if prompts else 0
        if full.shape[0] != r * len(prompts):
            raise ProtocolError(f"stacked prompts have {full.shape[0]} rows, expected {r * len(prompts)}")
        for i, p in enumerate(prompts):
            put(p, full[i * r:(i + 1) * r])
        return
    blocks = sorted({k.split("/")[1] for k in dvpt}, key=int)
    for b in blocks:
        try:
            left, right = dvpt[f"dvpt/{b}/A"], dvpt[f"dvpt/{b}/B"]
        except KeyError as exc:
            raise ProtocolError(f"incomplete prompt factors for block {b}") from exc
        put(vit.prompt_path(int(b)), left @ right)


def payload_to_text(payload: Payload) -> str:
    """Human-readable dump for debugging; not a wire format."""
    import json

    doc = {
        "strategy": payload.strategy,
        "num_samples": payload.num_samples,
        "num_elements": payload.num_elements,
        "tensors": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                    for k, v in payload.tensors.items()},
    }
    return json.dumps(doc, indent=1)
