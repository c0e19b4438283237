import csv
import io

import numpy as np
import pytest

from fedpeft import accounting, vit
from fedpeft.accounting import accounting_table, count_exchangeable, predicted_layout, table_csv
from fedpeft.peft import PeftConfig, RoundPlan, StrategyId, trainable_set
from fedpeft.vit import VitConfig

B16 = VitConfig.vit_b16(7)
PC = PeftConfig()


def tree_count(sid, cfg, peft_cfg):
    """Count by summing actual tensor shapes of the trainable set."""
    shapes = vit.param_shapes(cfg)
    total = 0
    for p in trainable_set(sid, cfg, RoundPlan(1, sba_block=1), peft_cfg):
        if p.startswith("prompt/"):
            total += peft_cfg.num_prompts * cfg.dim
        elif p.startswith("lora/"):
            total += peft_cfg.lora_rank * cfg.dim
        else:
            total += int(np.prod(shapes[p]))
    return total


def test_full_model_count_equals_tree():
    assert accounting.backbone_count(B16) + accounting.head_count(B16) == sum(
        int(np.prod(s)) for s in vit.param_shapes(B16).values())


@pytest.mark.parametrize("sid", [s for s in StrategyId if s not in (StrategyId.LOCAL, StrategyId.DVPT,
                                                                    StrategyId.LORA_DVPT)])
@pytest.mark.parametrize("cfg", [B16, VitConfig()], ids=["b16", "desk"])
def test_closed_form_matches_tree_sum(sid, cfg):
    assert count_exchangeable(sid, cfg, PC).uplink == tree_count(sid, cfg, PC)


@pytest.mark.parametrize("sid", [s for s in StrategyId if s is not StrategyId.LOCAL])
@pytest.mark.parametrize("mode", ["per_block", "global"])
def test_closed_form_matches_predicted_layout(sid, mode):
    pc = PeftConfig(dvpt_mode=mode)
    row = count_exchangeable(sid, B16, pc)
    assert row.uplink == sum(predicted_layout(sid, B16, pc, sba_block=5).values())


def test_table_values_for_vit_b16():
    rows = {r.strategy: r.uplink for r in accounting_table(B16, PC)}
    head = 768 * 7 + 7
    attn = 4 * (768 * 768 + 768)
    assert rows[StrategyId.LINEAR_PROBE] == head == 5383
    assert rows[StrategyId.ABA] == 12 * attn + head
    assert rows[StrategyId.SBA] == attn + head
    assert rows[StrategyId.VPT] == 12 * 50 * 768 + head
    assert rows[StrategyId.LORA] == 12 * 2 * 2 * 4 * 768 + head
    assert rows[StrategyId.LORA_DVPT] == 12 * 2 * 2 * 4 * 768 + 12 * (50 * 8 + 8 * 768) + head
    assert rows[StrategyId.LOCAL] == 0


def test_trainable_and_storage_differ_where_expected():
    sba = count_exchangeable("sba", B16)
    assert sba.trainable == sba.uplink and sba.storage > sba.uplink
    d = count_exchangeable("lora+dvpt", B16)
    assert d.trainable > d.uplink  # full prompts train, factors travel
    local = count_exchangeable("local", B16)
    assert local.uplink == 0 and local.trainable == count_exchangeable("fullft", B16).trainable


def test_csv_shape_and_percentages():
    text = table_csv(accounting_table(B16, PC))
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == ["method", "parameters", "elements", "millions", "percent"]
    assert len(rows) == len(accounting.TABLE_ORDER)
    full = int(rows[0]["elements"])
    for r in rows:
        assert abs(float(r["percent"]) - 100 * int(r["elements"]) / full) < 5e-4
        assert abs(float(r["millions"]) - int(r["elements"]) / 1e6) <= 5e-4


def test_verification_names_mismatches():
    from fedpeft.federation import RoundRecord

    cfg = VitConfig()
    row = count_exchangeable("linear_probe", cfg)
    good = RoundRecord(1, "linear_probe", (0.0,), 0.5, 2 * row.uplink, 2 * row.downlink, 0, 0,
                       payload_layout={"head/weight": cfg.dim * 4, "head/bias": 4})
    assert accounting.verify_against_runtime(row, [good], 2, cfg)
    bad = RoundRecord(1, "linear_probe", (0.0,), 0.5, 2 * row.uplink + 1, 2 * row.downlink, 0, 0,
                      payload_layout={"head/weight": cfg.dim * 4})
    res = accounting.verify_against_runtime(row, [bad], 2, cfg)
    assert not res
    assert any("uplink" in d for d in res.diffs) and any("head/bias" in d for d in res.diffs)
