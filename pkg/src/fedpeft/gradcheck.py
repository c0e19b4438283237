"""Central finite-difference checks for the tape engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheck:
    max_rel_error: float
    worst: tuple  # (input index, flat coordinate)
    checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def rel_error(analytic, numeric, floor=1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(fn, inputs, eps=1e-6, coords=None, rng=None, floor=1e-8,
                    scale_floor=1e-3) -> GradCheck:
    """Compare tape gradients of scalar ``fn(*tensors)`` with central differences.

    The denominator of the relative error never drops below
    ``max(floor, scale_floor * max|grad|)``, the max taken over every input,
    so coordinates whose true gradient is zero (a key bias under softmax,
    say) are judged against the function's gradient scale rather than
    against rounding noise.

    ``coords`` caps the number of coordinates probed per input (sampled with
    ``rng``); ``None`` probes every coordinate.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        loss = fn(*leaves)
    backward(loss)

    def value(i, j, delta):
        probe = [a.copy() for a in arrays]
        probe[i].reshape(-1)[j] += delta
        return float(fn(*[Tensor(p) for p in probe]).data)

    grads = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]
    top = max(float(np.abs(g).max(initial=0.0)) for g in grads)
    lo = max(floor, scale_floor * top)
    worst, where, count = 0.0, (-1, -1), 0
    for i, a in enumerate(arrays):
        flat = grads[i].reshape(-1)
        idx = np.arange(a.size)
        if coords is not None and coords < a.size:
            idx = np.sort(rng.choice(a.size, size=coords, replace=False))
        for j in idx:
            num = (value(i, j, eps) - value(i, j, -eps)) / (2 * eps)
            err = float(rel_error(flat[j], num, lo))
            count += 1
            if err > worst:
                worst, where = err, (i, int(j))
    return GradCheck(worst, where, count)


def vit_loss_check(seed: int, cfg=None, batch: int = 3, coords: int = 2, num_prompts: int = 2,
                   lora_rank: int = 2) -> GradCheck:
    """Finite-difference check of the full ViT loss, prompts and LoRA included.

    Every tensor of the model is a leaf; ``coords`` coordinates of each are
    probed. LoRA ``B`` is made non-zero so both factors carry gradient.
    """
    from . import vit
    from .peft import PeftConfig, StrategyId, init_strategy
    from .rng import Rng
    from .tensor import cross_entropy

    cfg = cfg or vit.VitConfig(dim=16, depth=2, heads=2, image_size=8, patch_size=4)
    rng = Rng(seed).child("vit-gradcheck")
    params = vit.init_params(cfg, rng.child("init"))
    state = init_strategy(StrategyId.LORA_VPT, cfg,
                          PeftConfig(num_prompts=num_prompts, lora_rank=lora_rank),
                          rng.child("peft"), params)
    for path in state.lora.tensors:
        if path.endswith("/B"):
            state.lora.tensors[path] = rng.child("B", path).normal(scale=0.2, size=(cfg.dim, lora_rank))
    x = rng.child("x").uniform(size=(batch, cfg.channels, cfg.image_size, cfg.image_size))
    y = rng.child("y").integers(0, cfg.num_classes, size=batch)
    arrays = {**params, **state.prompts.tensors, **state.lora.tensors}
    names = sorted(arrays)

    def loss(*leaves):
        bound = dict(zip(names, leaves))
        logits = vit.forward(cfg, x, params, state.prompts, state.lora, leaves=bound)
        return cross_entropy(logits, y)

    return check_gradients(loss, [arrays[n] for n in names], coords=coords, rng=rng.child("coords"))
