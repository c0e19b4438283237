"""Closed-form counts of exchanged parameters, and runtime cross-checks."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .peft import COMPONENTS, DISPLAY_NAMES, PeftConfig, StrategyId, parse_strategy
from .vit import VitConfig

TABLE_ORDER = (
    StrategyId.FULL_FT, StrategyId.ABA_VPT, StrategyId.ABA, StrategyId.SBA_VPT,
    StrategyId.SBA, StrategyId.LORA_VPT, StrategyId.VPT, StrategyId.LORA_DVPT,
    StrategyId.LORA, StrategyId.LINEAR_PROBE, StrategyId.LOCAL,
)

PARAMETER_LABELS = {
    StrategyId.FULL_FT: "Psi, eta",
    StrategyId.ABA_VPT: "Theta, eta, P_v",
    StrategyId.ABA: "Theta, eta",
    StrategyId.SBA_VPT: "theta_l*, eta, P_v",
    StrategyId.SBA: "theta_l*, eta",
    StrategyId.LORA_VPT: "A, B, P_v, eta",
    StrategyId.VPT: "P_v, eta",
    StrategyId.LORA_DVPT: "A, B, A_vp, B_vp, eta",
    StrategyId.DVPT: "A_vp, B_vp, eta",
    StrategyId.LORA: "A, B, eta",
    StrategyId.LINEAR_PROBE: "eta",
    StrategyId.LOCAL: "Psi, eta",
}


def head_count(cfg: VitConfig) -> int:
    return cfg.dim * cfg.num_classes + cfg.num_classes


def attention_count(cfg: VitConfig) -> int:
    """W_Q, W_K, W_V, W_O with biases, one block."""
    return 4 * (cfg.dim * cfg.dim + cfg.dim)


def block_count(cfg: VitConfig) -> int:
    d, h = cfg.dim, cfg.hidden
    return 2 * 2 * d + attention_count(cfg) + (d * h + h) + (h * d + d)


def backbone_count(cfg: VitConfig) -> int:
    d = cfg.dim
    embed = cfg.patch_dim * d + d
    tokens = d + (cfg.num_patches + 1) * d
    return embed + tokens + cfg.depth * block_count(cfg) + 2 * d


def prompt_count(cfg: VitConfig, peft: PeftConfig) -> int:
    return cfg.depth * peft.num_prompts * cfg.dim


def dvpt_count(cfg: VitConfig, peft: PeftConfig) -> int:
    r, k, d, L = peft.num_prompts, peft.prompt_rank, cfg.dim, cfg.depth
    if not r:
        return 0
    if peft.dvpt_mode == "global":
        return L * r * k + k * d
    return L * (r * k + k * d)


def lora_count(cfg: VitConfig, peft: PeftConfig) -> int:
    return cfg.depth * 2 * 2 * peft.lora_rank * cfg.dim


@dataclass
class AccountingRow:
    strategy: StrategyId
    trainable: int  # elements updated in one round
    uplink: int  # per client per round
    downlink: int  # per client per round
    storage: int  # task-specific elements kept after training
    percent: float  # 100 * uplink / full fine-tuning uplink
    breakdown: dict = field(default_factory=dict)

    @property
    def millions(self) -> float:
        return round(self.uplink / 1e6, 3)


def _components(cfg, peft, comps, sba=True):
    parts = {}
    if "full" in comps:
        parts["backbone"] = backbone_count(cfg)
    if "aba" in comps:
        parts["attention"] = cfg.depth * attention_count(cfg)
    if "sba" in comps:
        parts["attention"] = attention_count(cfg) if sba else cfg.depth * attention_count(cfg)
    if "vpt" in comps:
        parts["prompts"] = prompt_count(cfg, peft)
    if "dvpt" in comps:
        parts["prompt_factors"] = dvpt_count(cfg, peft)
    if "lora" in comps:
        parts["lora"] = lora_count(cfg, peft)
    parts["head"] = head_count(cfg)
    return parts


def count_exchangeable(strategy, cfg: VitConfig, peft: PeftConfig | None = None) -> AccountingRow:
    """Symbolic per-round counts for one strategy."""
    sid = parse_strategy(strategy)
    peft = peft or PeftConfig()
    comps = COMPONENTS[sid]
    parts = _components(cfg, peft, comps)
    exchanged = sum(parts.values())
    trainable = dict(parts)
    if "dvpt" in comps:
        trainable.pop("prompt_factors")
        trainable["prompts"] = prompt_count(cfg, peft)
    storage = sum(_components(cfg, peft, comps, sba=False).values())
    full = backbone_count(cfg) + head_count(cfg)
    if sid is StrategyId.LOCAL:
        exchanged = 0
        parts = {}
    return AccountingRow(
        strategy=sid,
        trainable=sum(trainable.values()),
        uplink=exchanged,
        downlink=exchanged,
        storage=storage,
        percent=100.0 * exchanged / full,
        breakdown=parts,
    )


def accounting_table(cfg: VitConfig, peft: PeftConfig | None = None, order=TABLE_ORDER) -> list:
    return [count_exchangeable(s, cfg, peft) for s in order]


def table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "parameters", "elements", "millions", "percent"])
    for row in rows:
        w.writerow([DISPLAY_NAMES[row.strategy], PARAMETER_LABELS[row.strategy], row.uplink,
                    f"{row.uplink / 1e6:.3f}", f"{row.percent:.3f}"])
    return buf.getvalue()


# runtime cross-check -------------------------------------------------------

def predicted_layout(strategy, cfg: VitConfig, peft: PeftConfig, sba_block=None) -> dict:
    """Per-key element counts a client payload must carry."""
    from .peft import RoundPlan, trainable_set
    from .vit import param_shapes

    sid = parse_strategy(strategy)
    if sid is StrategyId.LOCAL:
        return {}
    plan = RoundPlan(t=1, sba_block=sba_block)
    shapes = param_shapes(cfg)
    out = {}
    dvpt = "dvpt" in COMPONENTS[sid]
    r, k, d = peft.num_prompts, peft.prompt_rank, cfg.dim
    prompts = []
    for path in trainable_set(sid, cfg, plan, peft):
        if path.startswith("prompt/"):
            if dvpt:
                prompts.append(path)
                continue
            out[path] = r * d
        elif path.startswith("lora/"):
            out[path] = peft.lora_rank * d
        else:
            n = 1
            for s in shapes[path]:
                n *= s
            out[path] = n
    if prompts:
        if peft.dvpt_mode == "global":
            out["dvpt/all/A"] = cfg.depth * r * k
            out["dvpt/all/B"] = k * d
        else:
            for p in prompts:
                b = p.split("/")[1]
                out[f"dvpt/{b}/A"] = r * k
                out[f"dvpt/{b}/B"] = k * d
    return out


@dataclass
class Verification:
    ok: bool
    diffs: list

    def __bool__(self):
        return self.ok


def verify_against_runtime(row: AccountingRow, records, num_clients: int,
                           cfg: VitConfig | None = None, peft: PeftConfig | None = None) -> Verification:
    """Check recorded traffic against the symbolic prediction, round by round."""
    diffs = []
    for rec in records:
        want_up = num_clients * row.uplink
        want_down = num_clients * row.downlink
        if rec.uplink_elements != want_up:
            diffs.append(f"round {rec.t}: uplink {rec.uplink_elements} != predicted {want_up}")
        if rec.downlink_elements != want_down:
            diffs.append(f"round {rec.t}: downlink {rec.downlink_elements} != predicted {want_down}")
        if cfg is not None:
            layout = predicted_layout(row.strategy, cfg, peft or PeftConfig(), rec.sba_block)
            got = rec.payload_layout
            for key in sorted(set(layout) | set(got)):
                if layout.get(key) != got.get(key):
                    diffs.append(f"round {rec.t}: {key}: measured {got.get(key)} != predicted {layout.get(key)}")
    return Verification(not diffs, diffs)
