"""Stand-alone model checks with machine-readable reports.

Every check returns a :class:`Report` whose ``lines()`` are ``key=value``
text and whose ``passed`` flag drives the CLI exit code.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import evaluate
from .likelihood import bits_per_dim, joint_nll
from .masks import kernel_offsets, receptive_field_closure
from .net import Network
from .orders import GenerationOrder


@dataclass
class Report:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    gating: bool = True

    def lines(self):
        status = "pass" if self.passed else ("fail" if self.gating else "warn")
        yield f"check={self.name} status={status}"
        for k, v in self.details.items():
            yield f"{self.name}.{k}={v}"


def input_jacobian(net: Network, x: np.ndarray, order: GenerationOrder, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of every output w.r.t. every input pixel.

    Returns ``J[i, j]`` = max over output channels and input channels of
    ``|d out[:, order[i]] / d x[order[j]]|``, both indexed by order position.
    ``x`` is a single model input of shape (1, C, H, W).
    """
    _, c, hh, ww = x.shape
    d = hh * ww
    masks = net.masks_for(order)
    seq = order.sequence
    jac = np.zeros((d, d))
    for ch in range(c):
        batch = np.repeat(x, 2 * d, axis=0)
        for j, (r, col) in enumerate(seq):
            batch[2 * j, ch, r, col] += h
            batch[2 * j + 1, ch, r, col] -= h
        out = net.forward(batch, masks)
        diff = np.abs(out[0::2] - out[1::2]) / (2 * h)  # (d, P, H, W) indexed by input j
        per_out = diff.max(axis=1)[:, seq[:, 0], seq[:, 1]]  # (j, i)
        jac = np.maximum(jac, per_out.T)
    return jac


def _mask_fault_layer(net: Network, order: GenerationOrder) -> Optional[int]:
    """First layer whose mask lets some location read a cell that is not a
    strict predecessor (first layer) or a predecessor-or-self (deeper layers)."""
    h, w = order.shape
    pos = order.position.ravel()
    for l, m in enumerate(net.masks_for(order)):
        offr, offc = kernel_offsets(m.k1, m.k2, m.dilation)
        rr, cc = np.divmod(np.arange(h * w), w)
        sr = rr[None] + offr[:, None]
        sc = cc[None] + offc[:, None]
        inside = (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
        src = np.where(inside, pos[np.clip(sr, 0, h - 1) * w + np.clip(sc, 0, w - 1)], -1)
        tgt = np.broadcast_to(pos[None], src.shape)
        bits = m.bits.reshape(m.in_channels, m.kernel_area, h * w).any(axis=0)
        bad = bits & inside & ((src > tgt) | ((src == tgt) & m.is_first_layer))
        if bad.any():
            return l
    return None


def causality_jacobian_check(net: Network, order: GenerationOrder, seed: int = 0, tol: float = 1e-8,
                             h: float = 1e-5) -> Report:
    """All outputs at ``order[i]`` must be independent of inputs at ``order[j]`` for ``j >= i``."""
    cfg = net.config
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(1,) + cfg.image_shape)
    jac = input_jacobian(net, x, order, h)
    upper = np.triu(jac)  # includes the diagonal
    worst = float(upper.max())
    passed = worst < tol
    details = {"order": order.name, "grid": f"{cfg.height}x{cfg.width}", "worst": f"{worst:.3e}", "tol": tol}
    if not passed:
        i, j = np.unravel_index(np.argmax(upper), upper.shape)
        details["violations"] = int((upper >= tol).sum())
        details["worst_i"] = int(i)
        details["worst_j"] = int(j)
        layer = _mask_fault_layer(net, order)
        details["layer"] = "unknown" if layer is None else layer
    return Report("causality", passed, details)


def blind_spot_report(order: GenerationOrder, kernel: int, dilation_schedule: Sequence[int]) -> Report:
    """Count, for every position, how many strict predecessors are reachable."""
    depth = len(dilation_schedule)
    reach = receptive_field_closure(order, kernel, kernel, dilation_schedule, depth)
    d = len(order)
    strict = np.tril(np.ones((d, d), dtype=bool), -1)
    missing = strict & ~reach
    reachable = (reach & strict).sum(axis=1)
    coverage = np.zeros(order.shape, dtype=np.int64)
    coverage[order.sequence[:, 0], order.sequence[:, 1]] = reachable
    n_missing = int(missing.sum())
    details = {
        "order": order.name,
        "depth": depth,
        "blind_spots": n_missing,
        "pixels_with_blind_spots": int(missing.any(axis=1).sum()),
        "coverage": ";".join(",".join(str(v) for v in row) for row in coverage),
    }
    report = Report("blind_spot", n_missing == 0, details, gating=False)
    report.coverage = coverage
    report.missing = missing
    return report


def order_generalization_eval(net: Network, data: np.ndarray, train_orders: Sequence[GenerationOrder],
                              held_out: GenerationOrder, max_ratio: float = 1.25) -> Report:
    """Mean bpd under the training orders vs. under an unseen order."""
    per, _ = evaluate(net, data, list(train_orders) + [held_out])
    bpd = bits_per_dim(per, net.config.dims)
    train_bpd = float(bpd[:-1].mean())
    held_bpd = float(bpd[-1])
    ratio = held_bpd / train_bpd
    return Report("order_generalization", ratio < max_ratio, {
        "train_bpd": f"{train_bpd:.6f}", "held_out_bpd": f"{held_bpd:.6f}", "ratio": f"{ratio:.6f}",
        "held_out": held_out.name, "max_ratio": max_ratio,
    })


def distribution_sum_check(net: Network, order: GenerationOrder, tol: float = 1e-6) -> Report:
    """Exhaustive sum of model probabilities over every image of a tiny grid."""
    cfg = net.config
    levels = net.head.levels
    n = cfg.dims
    if levels ** n > 2 ** 20:
        return Report("distribution_sum", True, {"skipped": f"{levels}^{n} images"})
    images = np.array(list(itertools.product(range(levels), repeat=n))).reshape((-1,) + cfg.image_shape)
    total = float(np.exp(-joint_nll(net, images, order)).sum())
    return Report("distribution_sum", abs(total - 1) <= tol, {"order": order.name, "total": repr(total)})


def gradient_check(net: Network, batch: np.ndarray, order: GenerationOrder, h: float = 1e-5,
                   tol: float = 1e-4) -> Report:
    """Analytic vs. central-difference gradients for every parameter tensor."""
    from .engine import loss_and_grads

    _, grads = loss_and_grads(net, batch, order)
    worst, worst_name = 0.0, ""
    for name, p in net.params.items():
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + h
            lp = _loss(net, batch, order)
            flat[idx] = old - h
            lm = _loss(net, batch, order)
            flat[idx] = old
            num.reshape(-1)[idx] = (lp - lm) / (2 * h)
        err = relative_error(grads[name], num)
        if err > worst:
            worst, worst_name = err, name
    return Report("gradients", worst < tol, {"worst_rel_err": f"{worst:.3e}", "worst_param": worst_name,
                                             "tol": tol})


def _loss(net, batch, order):
    return float(joint_nll(net, batch, order).mean())


def relative_error(a, b) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def run_all(net: Network, orders: Sequence[GenerationOrder], seed: int = 0) -> list:
    """Causality on every order plus blind-spot analysis for the configured depth."""
    reports = [causality_jacobian_check(net, o, seed) for o in orders]
    cfg = net.config
    reports.extend(blind_spot_report(o, cfg.kernel, cfg.dilations) for o in orders)
    if net.head.levels ** cfg.dims <= 2 ** 12:  # exhaustive sums only on tiny grids
        reports.extend(distribution_sum_check(net, o) for o in orders)
    return reports


def format_reports(reports) -> str:
    lines = []
    for r in reports:
        lines.extend(r.lines())
    passed = all(r.passed for r in reports if r.gating)
    lines.append(f"overall={'pass' if passed else 'fail'}")
    return "\n".join(lines)
