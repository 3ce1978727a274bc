"""Order-agnostic training, ancestral sampling and image completion."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument, NumericFailure
from .likelihood import joint_nll, logsumexp, pixel_log_prob_grad, pixel_log_probs
from .net import ForwardCache, Network
from .orders import GenerationOrder, ObservedSet, max_context_order

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    orders: Sequence[GenerationOrder]
    batch_size: int = 32
    lr: float = 2e-4
    decay: float = 1.0 - 5e-6
    clip_norm: float = 2e6
    epochs: int = 1
    seed: int = 0
    average_window: int = 0  # average parameters over this many final epochs (0 = off)
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.orders = list(self.orders)
        if self.lr <= 0:
            raise InvalidArgument("learning rate must be positive")
        if not 0 < self.decay <= 1:
            raise InvalidArgument("decay must lie in (0, 1]")
        if not self.orders:
            raise InvalidArgument("at least one training order is required")
        if self.batch_size < 1:
            raise InvalidArgument("batch size must be positive")


class Adam:
    """Adam with bias correction; the learning rate is supplied per step."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8):
        self.betas = tuple(betas)
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: dict, grads: dict, lr: float):
        b1, b2 = self.betas
        self.step += 1
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_dict(self):
        return {"step": self.step, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.step = int(state["step"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def loss_and_grads(net: Network, batch: np.ndarray, order: GenerationOrder):
    """Mean NLL (nats per image) of ``batch`` under ``order`` and its parameter gradients."""
    cache = ForwardCache()
    out = net.forward(net.head.model_input(batch), net.masks_for(order), cache)
    lp = pixel_log_probs(net.head, out, batch)
    b = batch.shape[0]
    loss = -lp.sum() / b
    dout = pixel_log_prob_grad(net.head, out, batch, np.full(lp.shape, -1.0 / b))
    grads = net.backward(dout, cache)
    grads.pop("input")
    return loss, grads


def train_step(net: Network, opt: Adam, batch: np.ndarray, order: GenerationOrder, lr: float,
               clip_norm: float = 2e6, step: Optional[int] = None) -> float:
    """One Adam step on the NLL of ``batch`` under a single order.

    Gradients are clipped to ``clip_norm`` in global L2 norm. A non-finite
    loss or gradient aborts the step before parameters are touched.
    """
    try:
        loss, grads = loss_and_grads(net, batch, order)
    except NumericFailure as exc:
        if exc.step is None:
            exc.step = step
        raise
    norm = global_norm(grads)
    if not (math.isfinite(loss) and math.isfinite(norm)):
        raise NumericFailure(f"non-finite loss at step {step}", step=step)
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    opt.update(net.params, grads, lr)
    return float(loss)


@dataclass
class Trainer:
    """Draws one order per batch uniformly from ``config.orders``."""

    net: Network
    config: TrainConfig
    opt: Optional[Adam] = None
    step: int = 0
    history: list = field(default_factory=list)
    order_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.opt is None:
            self.opt = Adam(self.net.params, self.config.betas, self.config.adam_eps)
        self.rng = np.random.default_rng(self.config.seed)
        if self.order_counts is None:
            self.order_counts = np.zeros(len(self.config.orders), dtype=np.int64)
        for order in self.config.orders:
            self.net.masks_for(order)  # compile every mask up front

    @property
    def lr(self):
        return self.config.lr * self.config.decay ** self.step

    def train_batch(self, batch) -> float:
        k = int(self.rng.integers(len(self.config.orders)))
        self.order_counts[k] += 1
        loss = train_step(self.net, self.opt, batch, self.config.orders[k], self.lr,
                          self.config.clip_norm, self.step)
        self.step += 1
        self.history.append(loss)
        return loss

    def train_epoch(self, data: np.ndarray) -> float:
        idx = self.rng.permutation(len(data))
        bs = self.config.batch_size
        losses = [self.train_batch(data[idx[i: i + bs]]) for i in range(0, len(data), bs)]
        return float(np.mean(losses))

    def fit(self, data: np.ndarray, epochs: Optional[int] = None, on_epoch=None) -> dict:
        """Train for ``epochs`` epochs; returns (possibly averaged) parameters."""
        epochs = self.config.epochs if epochs is None else epochs
        window = self.config.average_window
        snapshots = []
        for ep in range(epochs):
            loss = self.train_epoch(data)
            log.info("epoch %d step %d loss %.4f nats", ep, self.step, loss)
            if window and ep >= epochs - window:
                snapshots.append({k: v.copy() for k, v in self.net.params.items()})
            if on_epoch is not None:
                on_epoch(ep, loss)
        if snapshots:
            return average_parameters(snapshots)
        return self.net.params


def average_parameters(snapshots: Sequence[dict]) -> dict:
    """Element-wise mean of parameter dictionaries with identical layouts."""
    if not snapshots:
        raise InvalidArgument("nothing to average")
    first = snapshots[0]
    for s in snapshots[1:]:
        if s.keys() != first.keys() or any(s[k].shape != first[k].shape for k in first):
            raise InvalidArgument("parameter snapshots have mismatched shapes")
    return {k: np.mean([s[k] for s in snapshots], axis=0) for k in first}


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _generate(net: Network, x: np.ndarray, inp: np.ndarray, order: GenerationOrder, start: int,
              rng: np.random.Generator, temperature: float):
    masks = net.masks_for(order)
    logp = np.zeros(x.shape[0])
    for i in range(start, len(order)):
        r, c = order[i]
        out = net.forward(inp, masks)[:, :, r, c]
        v = net.head.sample_pixel(out, rng, temperature)
        logp += net.head.pixel_log_prob(out, v)
        x[:, :, r, c] = v
        inp[:, :, r, c] = net.head.model_input(v)
    return x, logp


def sample(net: Network, order: GenerationOrder, n: int = 1, rng=None, temperature: float = 1.0):
    """Ancestral sampling along ``order``.

    Returns integer images ``(n, C, H, W)`` and the log-probability of each
    sample under the model (exact at ``temperature == 1``).
    """
    rng = _rng(rng)
    cfg = net.config
    x = np.zeros((n,) + cfg.image_shape, dtype=np.int64)
    inp = np.zeros(x.shape)
    return _generate(net, x, inp, order, 0, rng, temperature)


def _check_prefix(order: GenerationOrder, observed: ObservedSet):
    if order.shape != (observed.height, observed.width):
        raise InvalidArgument("order and observed set have different grid sizes")
    n_obs = len(observed)
    prefix = order.sequence[:n_obs]
    if not observed.bitmap[prefix[:, 0], prefix[:, 1]].all():
        raise InvalidArgument("order prefix does not coincide with the observed set")
    return n_obs


def complete(net: Network, images: np.ndarray, observed: ObservedSet,
             order: Optional[GenerationOrder] = None, rng=None, temperature: float = 1.0):
    """Fill the hidden pixels of ``images`` by sampling along ``order``.

    The order must enumerate the observed cells first. Hidden pixels are
    zeroed in the model input before sampling and are never read. Returns the
    completed images and the log-probability of the sampled hidden values.
    """
    rng = _rng(rng)
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != net.config.image_shape:
        raise InvalidArgument(f"image shape {images.shape[1:]} does not match model {net.config.image_shape}")
    if order is None:
        order = max_context_order(observed)
    n_obs = _check_prefix(order, observed)
    keep = observed.bitmap[None, None]
    x = np.where(keep, images, 0).astype(np.int64)
    inp = np.where(keep, net.head.model_input(x), 0.0)
    return _generate(net, x, inp, order, n_obs, rng, temperature)


def conditional_nll(net: Network, images: np.ndarray, observed: ObservedSet, order: GenerationOrder):
    """NLL in nats of the hidden pixels, each conditioned on its parents under ``order``.

    With an order whose prefix is the observed set this is
    ``-log p(hidden | observed)``; with any other order (e.g. one that visits
    the hidden region first) it is the sum of whatever conditionals that order
    assigns to the hidden pixels.
    """
    images = np.asarray(images)
    if order.shape != (observed.height, observed.width):
        raise InvalidArgument("order and observed set have different grid sizes")
    out = net.forward(net.head.model_input(images), net.masks_for(order))
    lp = pixel_log_probs(net.head, out, images)
    return -(lp * observed.hidden[None]).sum(axis=(1, 2))


def conditional_nll_ensemble(net: Network, images, observed: ObservedSet, orders):
    """``-log mean_k p_k(hidden | observed)`` over several orders."""
    orders = list(orders)
    if not orders:
        raise InvalidArgument("ensemble needs at least one order")
    nlls = np.stack([conditional_nll(net, images, observed, o) for o in orders])
    return -(logsumexp(-nlls, axis=0) - math.log(len(orders)))


def evaluate(net: Network, data: np.ndarray, orders: Sequence[GenerationOrder], batch_size: int = 256):
    """Per-order and ensemble NLL (nats per image) averaged over ``data``."""
    per_order = np.zeros((len(orders), len(data)))
    for s in range(0, len(data), batch_size):
        chunk = data[s: s + batch_size]
        for k, o in enumerate(orders):
            per_order[k, s: s + len(chunk)] = joint_nll(net, chunk, o)
    ens = -(logsumexp(-per_order, axis=0) - math.log(len(orders)))
    return per_order.mean(axis=1), float(ens.mean())
