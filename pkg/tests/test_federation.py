import dataclasses

import numpy as np
import pytest

from fedpeft import accounting, experiment, federation, peft, vit
from fedpeft.errors import ConfigError, ProtocolError, TrainingError
from fedpeft.federation import (ClientUpdate, FederationConfig, FedSetup, Federation, aggregate,
                                aggregate_dvpt, aggregate_fedavg, aggregate_lora, sba_schedule)
from fedpeft.peft import Payload, PeftConfig, RoundPlan, StrategyId, trainable_set
from fedpeft.rng import Rng


def pay(tensors, n, strategy="fullft"):
    return Payload(strategy, {k: np.asarray(v, dtype=float) for k, v in tensors.items()}, n)


# aggregation ---------------------------------------------------------------

def test_two_client_weighted_mean():
    out = aggregate_fedavg([pay({"w": [1.0]}, 1), pay({"w": [3.0]}, 3)])
    assert out.tensors["w"][0] == 2.5
    assert out.num_samples == 4


def test_identical_updates_are_bit_exact():
    x = Rng(0).normal(size=(5, 7)) * 1e3
    ups = [pay({"w": x}, n) for n in (3, 11, 5)]
    assert np.array_equal(aggregate_fedavg(ups).tensors["w"], x)


def test_weighted_mean_matches_direct_formula():
    r = Rng(1)
    xs = [r.normal(size=(4,)) for _ in range(4)]
    ns = [2, 9, 1, 5]
    got = aggregate_fedavg([pay({"w": x}, n) for x, n in zip(xs, ns)]).tensors["w"]
    want = sum(n * x for n, x in zip(ns, xs)) / sum(ns)
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_aggregation_protocol_errors():
    with pytest.raises(ProtocolError):
        aggregate_fedavg([])
    with pytest.raises(ProtocolError):
        aggregate_fedavg([pay({"w": [1.0]}, 1), pay({"v": [1.0]}, 1)])
    with pytest.raises(ProtocolError):
        aggregate_fedavg([pay({"w": [1.0]}, 1), pay({"w": [1.0, 2.0]}, 1)])
    with pytest.raises(ProtocolError):
        aggregate_fedavg([pay({"w": [1.0]}, 1), pay({"w": [1.0]}, 1, "vpt")])
    with pytest.raises(ProtocolError):
        aggregate_fedavg([pay({"w": [1.0]}, 0)])


def lora_updates(C, d=16, r=4, seed=0):
    rng = Rng(seed).child("lora-oracle")
    ups = []
    for c in range(C):
        ups.append(pay({"lora/1/Q/A": rng.normal(size=(r, d)), "lora/1/Q/B": rng.normal(size=(d, r))},
                       int(rng.integers(1, 50)), "lora"))
    return ups


def oracle_lora(ups, r):
    ns = np.array([u.num_samples for u in ups], dtype=float)
    mean = sum(n * (u.tensors["lora/1/Q/B"] @ u.tensors["lora/1/Q/A"]) for n, u in zip(ns, ups)) / ns.sum()
    U, S, Vt = np.linalg.svd(mean)
    return (U[:, :r] * S[:r]) @ Vt[:r]


@pytest.mark.parametrize("seed", range(10))
def test_lora_resplit_matches_full_svd_oracle(seed):
    ups = lora_updates(3, seed=seed)
    out = aggregate_lora(ups)
    B, A = out.tensors["lora/1/Q/B"], out.tensors["lora/1/Q/A"]
    assert B.shape == (16, 4) and A.shape == (4, 16)
    assert np.linalg.norm(B @ A - oracle_lora(ups, 4)) < 1e-8


def test_lora_single_client_reconstructs_exactly():
    ups = lora_updates(1)
    out = aggregate_lora(ups)
    want = ups[0].tensors["lora/1/Q/B"] @ ups[0].tensors["lora/1/Q/A"]
    assert np.linalg.norm(out.tensors["lora/1/Q/B"] @ out.tensors["lora/1/Q/A"] - want) < 1e-8


def test_lora_balanced_split_also_matches_oracle():
    ups = lora_updates(3, seed=4)
    out = aggregate_lora(ups, split="balanced")
    B, A = out.tensors["lora/1/Q/B"], out.tensors["lora/1/Q/A"]
    assert np.linalg.norm(B @ A - oracle_lora(ups, 4)) < 1e-8
    np.testing.assert_allclose(np.linalg.norm(B, axis=0), np.linalg.norm(A, axis=1), rtol=1e-9)


def test_lora_all_zero_b_gives_zero_update():
    ups = lora_updates(3)
    for u in ups:
        u.tensors["lora/1/Q/B"][:] = 0.0
    out = aggregate_lora(ups)
    assert np.all(out.tensors["lora/1/Q/B"] == 0)
    assert np.all(out.tensors["lora/1/Q/B"] @ out.tensors["lora/1/Q/A"] == 0)
    # the default split keeps A orthonormal so B can grow again
    np.testing.assert_allclose(out.tensors["lora/1/Q/A"] @ out.tensors["lora/1/Q/A"].T, np.eye(4), atol=1e-12)


def test_dvpt_identical_clients_round_trip():
    r = Rng(3)
    A, B = r.normal(size=(6, 3)), r.normal(size=(3, 16))
    ups = [pay({"dvpt/1/A": A, "dvpt/1/B": B}, n, "dvpt") for n in (2, 5)]
    out = aggregate_dvpt(ups)
    np.testing.assert_allclose(out.tensors["dvpt/1/A"] @ out.tensors["dvpt/1/B"], A @ B, atol=1e-10)


def test_dvpt_average_matches_oracle():
    r = Rng(4)
    ups = [pay({"dvpt/2/A": r.normal(size=(6, 3)), "dvpt/2/B": r.normal(size=(3, 16))}, n, "dvpt")
           for n in (2, 5, 4)]
    ns = np.array([2, 5, 4.0])
    mean = sum(n * u.tensors["dvpt/2/A"] @ u.tensors["dvpt/2/B"] for n, u in zip(ns, ups)) / ns.sum()
    U, S, Vt = np.linalg.svd(mean)
    out = aggregate_dvpt(ups)
    np.testing.assert_allclose(out.tensors["dvpt/2/A"] @ out.tensors["dvpt/2/B"],
                               (U[:, :3] * S[:3]) @ Vt[:3], atol=1e-10)


def test_dispatcher_keeps_key_order_and_groups():
    r = Rng(5)
    t = {"lora/1/Q/A": r.normal(size=(2, 8)), "lora/1/Q/B": r.normal(size=(8, 2)),
         "head/weight": r.normal(size=(8, 3)), "head/bias": np.zeros(3)}
    out = aggregate([pay(t, 1, "lora"), pay(t, 2, "lora")])
    assert list(out.tensors) == list(t)
    assert np.array_equal(out.tensors["head/weight"], t["head/weight"])


def test_dvpt_uplink_elements_for_vit_b16():
    cfg = vit.VitConfig.vit_b16(7)
    row = accounting.count_exchangeable("lora+dvpt", cfg, PeftConfig())
    assert row.breakdown["prompt_factors"] == 12 * (50 * 8 + 8 * 768)


# schedule ------------------------------------------------------------------

def test_sba_schedule_statistics_and_reproducibility():
    sched = sba_schedule(42, 1200, 12)
    counts = np.bincount(sched, minlength=13)[1:]
    assert counts.sum() == 1200 and counts.min() >= 60 and counts.max() <= 140
    assert sched == sba_schedule(42, 1200, 12)
    assert sched != sba_schedule(43, 1200, 12)


def test_plan_uses_schedule():
    setup = FedSetup(StrategyId.SBA, vit.VitConfig(), PeftConfig(), FederationConfig(), 9)
    sched = sba_schedule(9, 5, 4)
    assert [federation.make_plan(setup, t).sba_block for t in range(1, 6)] == sched
    lora = dataclasses.replace(setup, strategy=StrategyId.LORA)
    assert federation.make_plan(lora, 1).sba_block is None


# runs ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small(desk_cfg, desk_task, desk_base):
    return desk_cfg, desk_task[0], desk_task[1], desk_base


def _setup(cfg, sid, **fed):
    return experiment.setup_for(cfg, sid, 0, **fed)


def _tree(model):
    return {k: v.copy() for k, v in model.arrays().items()}


@pytest.mark.parametrize("sid", list(StrategyId))
def test_one_round_changes_only_the_trainable_set(small, sid):
    cfg, task, part, base = small
    fed = Federation(_setup(cfg, sid, rounds=1), task, part, base)
    before = _tree(fed.global_model)
    clients_before = [_tree(c.model) for c in fed.clients]
    plan = federation.make_plan(fed.setup, 1)
    allowed = set(trainable_set(sid, cfg.vit, plan, cfg.peft))
    fed.step(1)
    for old, model in [(before, fed.global_model)] + list(zip(clients_before, [c.model for c in fed.clients])):
        now = model.arrays()
        changed = {k for k in now if not np.array_equal(now[k], old[k])}
        assert changed <= allowed, changed - allowed
        if model is fed.global_model and sid is StrategyId.LOCAL:
            assert not changed  # no server model in purely local training
        else:
            assert changed, "nothing trained"


@pytest.mark.parametrize("sid", [s for s in StrategyId if s is not StrategyId.LOCAL])
def test_aggregation_neutrality(small, sid):
    """Identical client payloads leave the broadcast model unchanged."""
    cfg, task, part, base = small
    fed = Federation(_setup(cfg, sid, rounds=1), task, part, base)
    plan = federation.make_plan(fed.setup, 1)
    paths = trainable_set(sid, cfg.vit, plan, cfg.peft)
    before = fed.global_model.copy()
    p = peft.encode_payload(sid, fed.global_model, paths, 10, cfg.peft)
    agg = aggregate([ClientUpdate(c, p.copy(), 0.0) for c in range(3)])
    peft.decode_payload(agg, fed.global_model)
    lossy = peft.uses(sid, "lora") or peft.uses(sid, "dvpt")
    x = task.test.images[:16]
    if lossy:
        np.testing.assert_allclose(fed.global_model.forward(cfg.vit, x).data,
                                   before.forward(cfg.vit, x).data, atol=1e-8)
    else:
        assert all(np.array_equal(a, b) for a, b in zip(fed.global_model.arrays().values(),
                                                        before.arrays().values()))


def test_single_client_matches_centralized_sgd(small):
    cfg, task, _, base = small
    from fedpeft.data import partition

    rounds = 3
    setup = _setup(cfg, "fullft", rounds=rounds, num_clients=1)
    part = partition(task.train.labels, 1, "iid", Rng(0))
    fed = Federation(setup, task, part, base)
    records = fed.run()

    # oracle: plain mini-batch SGD over the same data in the same order
    server = Rng(setup.seed).child("server")
    params = vit.attach_head(base, cfg.vit.num_classes, server)
    data = task.train.subset(part.indices[0])
    shuffle = Rng(setup.seed).child("client", 0)
    paths = list(params)
    for t in range(1, rounds + 1):
        order = shuffle.child("shuffle", t, 0).permutation(len(data))
        losses = []
        for i in range(0, len(data), setup.fed.batch_size):
            idx = order[i:i + setup.fed.batch_size]
            losses.append(vit.sgd_step(cfg.vit, data.images[idx], data.labels[idx], params, paths, setup.fed.lr))
        assert records[t - 1].client_losses == (float(np.mean(losses)),)
        from fedpeft.data import balanced_accuracy
        acc = balanced_accuracy(vit.predict(cfg.vit, task.test.images, params), task.test.labels, 4)
        assert records[t - 1].balanced_accuracy == acc
    assert fed.global_model.params.equal(params)
    assert fed.clients[0].model.params.equal(params)


def test_threads_do_not_change_results(small):
    cfg, task, part, base = small
    a = Federation(_setup(cfg, "lora+vpt", rounds=2, threads=1), task, part, base).run()
    b = Federation(_setup(cfg, "lora+vpt", rounds=2, threads=3), task, part, base).run()
    for x, y in zip(a, b):
        assert x.client_losses == y.client_losses and x.balanced_accuracy == y.balanced_accuracy


def test_divergence_reports_round_client_and_partial_records(small):
    cfg, task, part, base = small
    bad = dataclasses.replace(task, train=dataclasses.replace(task.train, images=task.train.images.copy()))
    bad.train.images[part.indices[4][0]] = np.nan
    setup = _setup(cfg, "vpt", rounds=5)
    with pytest.raises(TrainingError) as info:
        federation.run_federation(setup, bad, part, base)
    assert info.value.round_index == 1 and info.value.client_id == 4
    assert info.value.partial_records == []


def test_partition_client_count_must_match(small):
    cfg, task, part, base = small
    with pytest.raises(ConfigError):
        federation.run_federation(_setup(cfg, "vpt", rounds=1, num_clients=5), task, part, base)


def test_traffic_matches_accounting(small):
    cfg, task, part, base = small
    for sid in ("sba+vpt", "lora+dvpt", "local"):
        setup = _setup(cfg, sid, rounds=2)
        recs = federation.run_federation(setup, task, part, base)
        assert experiment.check_accounting(cfg, setup, recs), sid


def test_warm_start_never_trains_on_holdout(small, monkeypatch):
    cfg, task, part, base = small
    seen = []
    real = federation.Federation.__init__

    def spy(self, setup, task_, part_, base_):
        seen.append(part_)
        real(self, setup, task_, part_, base_)

    monkeypatch.setattr(federation.Federation, "__init__", spy)
    setup = _setup(cfg, "vpt", rounds=1)
    res = federation.run_warm_start_scenario(setup, task, part, base, holdout=2, epochs=1)
    held = set(part.indices[2].tolist())
    assert len(seen) == 2
    for p in seen:
        used = set(np.concatenate(p.indices).tolist())
        assert not used & held and len(p.indices) == len(part.indices) - 1
    assert len(res.warm) == len(res.cold) == 1
    assert not res.warm_base.equal(base)
    with pytest.raises(ConfigError):
        federation.run_warm_start_scenario(setup, task, part, base, holdout=9)
