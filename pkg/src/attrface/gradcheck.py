"""Central finite-difference checking of analytic gradients.

Used by the test suite and by the ``gradcheck`` CLI command.  Checks are
run in f64 with step 1e-5; the error reported per leaf is

    max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)

i.e. relative for large entries and absolute near zero.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, no_grad, zero_grads

FD_STEP = 1e-5


def finite_difference_grad(fn: Callable[[], Tensor], leaf: Tensor,
                           step: float = FD_STEP) -> np.ndarray:
    """Numeric d(fn)/d(leaf) by central differences, one element at a time."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn: Callable[[], Tensor], leaves: Mapping[str, Tensor],
                    step: float = FD_STEP) -> dict[str, float]:
    """Compare backward() gradients of ``fn`` against finite differences.

    ``fn`` must rebuild the graph from the given leaves on every call (it is
    re-evaluated after each perturbation).  Returns the error per leaf name.
    """
    zero_grads(leaves.values())
    loss = fn()
    loss.backward()
    errors = {}
    for name, leaf in leaves.items():
        if leaf.grad is None:
            raise AssertionError(f"no gradient reached leaf '{name}'")
        analytic = leaf.grad.copy()
        numeric = finite_difference_grad(fn, leaf, step)
        errors[name] = max_relative_error(analytic, numeric)
    zero_grads(leaves.values())
    return errors


# ---------------------------------------------------------------------------
# canonical check suites (used by the tests and the gradcheck CLI command)
# ---------------------------------------------------------------------------

def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype="f64", requires_grad=True)


def _worst(fn, leaves) -> float:
    return max(check_gradients(fn, leaves).values())


def suite_ops(seed: int) -> dict[str, float]:
    """Worst finite-difference error per tensor primitive, one random case each."""
    from . import tensor as T

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}

    x = _leaf(rng, 2, 3, 5, 5)
    w = _leaf(rng, 4, 3, 3, 3)
    b = _leaf(rng, 4)
    errors["conv2d"] = _worst(
        lambda: T.tsum(T.mul(T.conv2d(x, w, b, 2, 1), T.conv2d(x, w, b, 2, 1))),
        {"x": x, "w": w, "b": b})

    xp = _leaf(rng, 2, 4, 3, 3)
    wp = _leaf(rng, 3, 4, 1, 1)
    bp = _leaf(rng, 3)
    errors["pointwise_conv"] = _worst(
        lambda: T.tsum(T.mul(T.pointwise_conv(xp, wp, bp), T.pointwise_conv(xp, wp, bp))),
        {"x": xp, "w": wp, "b": bp})

    g = _leaf(rng, 2, 3, 4, 4)
    errors["gap_spatial"] = _worst(lambda: T.tsum(T.mul(T.gap_spatial(g), T.gap_spatial(g))),
                                   {"x": g})
    errors["gmp_spatial"] = _worst(lambda: T.tsum(T.mul(T.gmp_spatial(g), T.gmp_spatial(g))),
                                   {"x": g})
    cm = _leaf(rng, 2, 5, 3, 3)
    errors["channel_mean_max"] = _worst(
        lambda: T.tsum(T.mul(T.channel_mean_max(cm), T.channel_mean_max(cm))), {"x": cm})

    a = _leaf(rng, 2, 3, 4, 4)
    c = _leaf(rng, 1, 3, 1, 1)
    errors["broadcast_add"] = _worst(lambda: T.tsum(T.mul(T.broadcast_add(a, c), a)),
                                     {"a": a, "c": c})
    errors["add"] = _worst(lambda: T.tsum(T.mul(T.add(a, a), c)), {"a": a, "c": c})
    errors["sub"] = _worst(lambda: T.tsum(T.mul(T.sub(a, c), a)), {"a": a, "c": c})
    errors["mul"] = _worst(lambda: T.tsum(T.mul(T.mul(a, c), a)), {"a": a, "c": c})

    # keep relu inputs clear of the kink: finite differences straddle x=0
    signs = rng.choice([-1.0, 1.0], size=(3, 4))
    r = Tensor(rng.uniform(0.2, 1.5, size=(3, 4)) * signs, dtype="f64", requires_grad=True)
    errors["relu"] = _worst(lambda: T.tsum(T.mul(T.relu(r), r)), {"r": r})
    errors["sigmoid"] = _worst(lambda: T.tsum(T.mul(T.sigmoid(r), r)), {"r": r})

    c1 = _leaf(rng, 2, 2, 3, 3)
    c2 = _leaf(rng, 2, 3, 3, 3)
    errors["concat_channels"] = _worst(
        lambda: T.tsum(T.mul(T.concat_channels(c1, c2), T.concat_channels(c1, c2))),
        {"a": c1, "b": c2})

    xl = _leaf(rng, 3, 4)
    wl = _leaf(rng, 4, 5)
    bl = _leaf(rng, 5)
    errors["linear"] = _worst(
        lambda: T.tsum(T.mul(T.linear(xl, wl, bl), T.linear(xl, wl, bl))),
        {"x": xl, "w": wl, "b": bl})
    errors["reshape"] = _worst(lambda: T.tsum(T.mul(T.reshape(xl, (4, 3)),
                                                    T.reshape(xl, (4, 3)))), {"x": xl})

    sm = _leaf(rng, 3, 5)
    smw = _leaf(rng, 3, 5)
    errors["softmax"] = _worst(lambda: T.tsum(T.mul(T.softmax(sm), smw)),
                               {"x": sm, "w": smw})
    targets = rng.integers(0, 5, size=3)
    errors["softmax_cross_entropy"] = _worst(
        lambda: T.softmax_cross_entropy(sm, targets), {"x": sm})

    p = Tensor(rng.uniform(0.1, 0.9, size=(4, 3)), dtype="f64", requires_grad=True)
    t = rng.integers(0, 2, size=(4, 3)).astype(np.float64)
    errors["bce"] = _worst(lambda: T.tmean(T.bce(p, t)), {"p": p})

    errors["sum"] = _worst(lambda: T.tsum(T.mul(a, a)), {"a": a})
    errors["mean"] = _worst(lambda: T.tmean(T.mul(a, a)), {"a": a})
    return errors


def suite_fusion(seed: int) -> dict[str, float]:
    """Finite-difference check of the attention fusion end to end."""
    from . import tensor as T
    from .fusion import DualAttentionFusion, FusionConfig

    rng = np.random.default_rng(seed)
    op = DualAttentionFusion(FusionConfig(channels=4, reduction=2, dtype="f64"), rng)
    for p in op.params.values():
        p.data = p.data.astype(np.float64)
    a = _leaf(rng, 2, 4, 3, 3)
    b = _leaf(rng, 2, 4, 3, 3)

    def fn():
        fused, _ = op.fuse(a, b)
        return T.tsum(T.mul(fused, fused))

    leaves = {"a": a, "b": b, **op.params}
    return {"fusion": max(check_gradients(fn, leaves).values())}


def suite_network(seed: int) -> dict[str, float]:
    """Finite-difference check of the joint loss through a tiny network."""
    from .network import AttributeSpec, MultiBranchModel, NetworkConfig, total_loss

    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(
        n_identities=3,
        backbone=((4, 2),),
        branch_width=4,
        embedding_dim=4,
        attributes=(AttributeSpec("male", 1.0), AttributeSpec("bald", 0.5)),
        reduction=2,
        dtype="f64",
        seed=seed,
    )
    model = MultiBranchModel(cfg)
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
    batch = _leaf(rng, 2, 1, 6, 6)
    ids = rng.integers(0, 3, size=2)
    attrs = rng.integers(0, 2, size=(2, 2)).astype(np.float64)

    def fn():
        out = model.forward(batch, branches=("sb", "fused"))
        return total_loss(out.fused_logits, ids, out.sb_probs, attrs, cfg)

    leaves = {"batch": batch}
    leaves.update({k: v for k, v in model.params.items() if not k.startswith("fr_head.")})
    return {"network": max(check_gradients(fn, leaves).values())}


GRADCHECK_SUITES = {"ops": suite_ops, "fusion": suite_fusion, "network": suite_network}


def run_gradcheck(modules: Sequence[str] = ("ops", "fusion", "network"),
                  seeds: Sequence[int] = range(10),
                  tolerance: float = 1e-4) -> tuple[dict[str, float], bool]:
    """Worst error per check over all seeds, plus whether all pass."""
    worst: dict[str, float] = {}
    for module in modules:
        suite = GRADCHECK_SUITES[module]
        for seed in seeds:
            for name, err in suite(seed).items():
                worst[name] = max(worst.get(name, 0.0), err)
    return worst, all(err <= tolerance for err in worst.values())
