"""Command-line entry point: ``lmconv train|eval|sample|complete|verify|bench``.

Exit codes: 0 success, 1 failed verification, 2 bad configuration or
arguments, 3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench
from .config import ConfigError, load_config
from .data import DatasetSpec
from .engine import (TrainConfig, Trainer, complete, conditional_nll, conditional_nll_ensemble,
                     evaluate, sample)
from .errors import FormatError, InvalidArgument, NumericFailure
from .formats import Checkpoint, image_grid, load_checkpoint, read_pnm, save_checkpoint, save_image
from .likelihood import LN2, bits_per_dim
from .masks import dump_mask
from .net import ModelConfig, Network
from .orders import (ADVERSARIAL_VARIANTS, MAX_CONTEXT_VARIANTS, ObservedSet, expand_order_names,
                     max_context_order, orders_from_names, s_curve_order)
from .verify import Report, causality_jacobian_check, format_reports, run_all

log = logging.getLogger("lmconv")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _model_config(run_model: dict, shape) -> ModelConfig:
    c, h, w = shape
    kwargs = dict(run_model)
    depth = kwargs.get("depth", 8)
    if "dilations" not in kwargs:
        kwargs["dilations"] = ((1, 1, 2, 1, 4, 1, 2, 1) * depth)[:depth]
    return ModelConfig(channels=c, height=h, width=w, **kwargs)


def _load_data(spec: DatasetSpec):
    try:
        train, test = spec.load()
    except (InvalidArgument, FormatError) as exc:
        raise ConfigError(str(exc), field="data.source") from exc
    if len(train) == 0:
        raise ConfigError("dataset produced no training images", field="data.source")
    return train, test


def _net_from_ckpt(path):
    ckpt = load_checkpoint(path)
    cfg = ModelConfig.from_dict(ckpt.config)
    return Network(cfg, ckpt.params), ckpt


def _dataset_from_ckpt(ckpt, override=None):
    if override is not None:
        return load_config(override).data
    spec = ckpt.meta.get("dataset")
    if spec is None:
        raise ConfigError("checkpoint has no dataset description; pass --config", field="config")
    return DatasetSpec(**spec)


def cmd_train(args):
    run = load_config(args.config)
    if args.seed is not None:
        run.data.seed = args.seed
        run.train["seed"] = args.seed
    train, test = _load_data(run.data)
    cfg = _model_config(run.model, train.shape[1:])
    if cfg.head == "logistic":
        cfg.bits = run.data.bits
    t = dict(run.train)
    order_names = expand_order_names(t.pop("orders", "s0..s7"))
    every = t.pop("checkpoint_every", 1)
    if args.epochs is not None:
        t["epochs"] = args.epochs
    orders = orders_from_names(order_names, cfg.height, cfg.width)
    tcfg = TrainConfig(orders=orders, **t)
    net = Network(cfg, seed=tcfg.seed)
    trainer = Trainer(net, tcfg)
    log.info("model %s, %d parameters, %d train / %d test images", cfg, net.num_parameters(), len(train), len(test))

    def checkpoint(epoch):
        meta = {"step": trainer.step, "seed": tcfg.seed, "epoch": epoch, "dataset": asdict(run.data),
                "loss_tail": [float(v) for v in trainer.history[-20:]]}
        save_checkpoint(Checkpoint(cfg.to_dict(), order_names, net.params, trainer.opt.state_dict(), meta),
                        args.out)

    def on_epoch(epoch, loss):
        line = f"epoch={epoch} step={trainer.step} train_nats={loss:.4f} train_bpd={loss / (cfg.dims * LN2):.4f}"
        if len(test):
            per, ens = evaluate(net, test, orders)
            line += " " + " ".join(f"test_bpd.{n}={b:.4f}" for n, b in zip(order_names, bits_per_dim(per, cfg.dims)))
            line += f" test_bpd.ensemble={ens / (cfg.dims * LN2):.4f}"
        print(line, flush=True)
        if every and (epoch + 1) % every == 0:
            checkpoint(epoch)

    final = trainer.fit(train, on_epoch=on_epoch)
    if final is not net.params:
        net.params.update(final)
    checkpoint(tcfg.epochs - 1)
    return EXIT_OK


def cmd_eval(args):
    net, ckpt = _net_from_ckpt(args.ckpt)
    cfg = net.config
    spec = _dataset_from_ckpt(ckpt, args.config)
    _, test = _load_data(spec)
    if args.limit:
        test = test[: args.limit]
    names = expand_order_names(args.orders or ckpt.orders)
    orders = orders_from_names(names, cfg.height, cfg.width)
    per, ens = evaluate(net, test, orders)
    binary = cfg.head == "binary"
    for name, nats in zip(names, per):
        extra = f" nats={nats:.4f}" if binary else ""
        print(f"order={name} bpd={nats / (cfg.dims * LN2):.6f}{extra}")
    if args.ensemble:
        extra = f" nats={ens:.4f}" if binary else ""
        print(f"order=ensemble({len(orders)}) bpd={ens / (cfg.dims * LN2):.6f}{extra}")
    return EXIT_OK


def cmd_sample(args):
    net, _ = _net_from_ckpt(args.ckpt)
    cfg = net.config
    order = orders_from_names([args.order], cfg.height, cfg.width)[0]
    images, logp = sample(net, order, args.n, np.random.default_rng(args.seed), args.temperature)
    save_image(image_grid(images, cols=args.cols), args.out, net.head.levels)
    for i, lp in enumerate(logp):
        print(f"sample={i} nll_nats={-lp:.4f}")
    return EXIT_OK


def _observed_from_mask(arg, h, w):
    if arg.startswith("file:"):
        hidden = read_pnm(arg[5:]).astype(bool)
        if hidden.shape != (h, w):
            raise UsageError(f"mask file is {hidden.shape[0]}x{hidden.shape[1]}, images are {h}x{w}")
        return ObservedSet(~hidden), None
    if arg not in MAX_CONTEXT_VARIANTS:
        raise UsageError(f"unknown mask {arg!r}; use top, bottom, left, right or file:<pbm>")
    return ObservedSet.hiding(arg, h, w), arg


def cmd_complete(args):
    net, ckpt = _net_from_ckpt(args.ckpt)
    cfg = net.config
    observed, region = _observed_from_mask(args.mask, cfg.height, cfg.width)
    if args.input:
        img = read_pnm(args.input)
        img = img[None] if img.ndim == 2 else img
        if img.shape != cfg.image_shape:
            raise UsageError(f"input image shape {img.shape} does not match model {cfg.image_shape}")
        images = img[None]
    else:
        _, test = _load_data(_dataset_from_ckpt(ckpt, args.config))
        images = test[args.index: args.index + args.n]
    variants = MAX_CONTEXT_VARIANTS[region] if region else (0, 1)
    orders = [max_context_order(observed, v) for v in variants]
    rng = np.random.default_rng(args.seed)
    done, _ = complete(net, images, observed, orders[0], rng, args.temperature)
    shown = np.where(observed.bitmap[None, None], images, 0)
    save_image(image_grid(np.concatenate([shown, done, images]), cols=len(images)), args.out, net.head.levels)
    nll1 = conditional_nll(net, images, observed, orders[0]).mean()
    nll2 = conditional_nll_ensemble(net, images, observed, orders).mean()
    hidden_dims = int(observed.hidden.sum()) * cfg.channels
    unit = "nats" if cfg.head == "binary" else "bpd"

    def fmt(n):
        return f"{n:.4f}" if unit == "nats" else f"{n / (hidden_dims * LN2):.4f}"

    print(f"conditional_{unit}.max_context_1={fmt(nll1)}")
    print(f"conditional_{unit}.max_context_{len(orders)}={fmt(nll2)}")
    if region:
        adv = s_curve_order(cfg.height, cfg.width, ADVERSARIAL_VARIANTS[region])
        print(f"conditional_{unit}.adversarial={fmt(conditional_nll(net, images, observed, adv).mean())}")
    return EXIT_OK


def cmd_verify(args):
    if args.ckpt:
        net, ckpt = _net_from_ckpt(args.ckpt)
        default_orders = ckpt.orders
    else:
        h, w = args.size
        net = Network(ModelConfig(channels=1, height=h, width=w, hidden=args.hidden, depth=args.depth,
                                  dilations=((1, 1, 2, 1) * args.depth)[: args.depth], head="binary"),
                      seed=args.seed)
        default_orders = ["s0..s7", "hilbert", "raster"]
    cfg = net.config
    names = expand_order_names(args.orders or default_orders)
    orders = orders_from_names(names, cfg.height, cfg.width)
    reports = run_all(net, orders, args.seed)
    if args.inject_fault:
        reports.append(_fault_injection_report(net, orders[0]))
    if args.dump_masks:
        out = Path(args.dump_masks)
        out.mkdir(parents=True, exist_ok=True)
        for name, order in zip(names, orders):
            for l, m in enumerate(net.masks_for(order)):
                dump_mask(m, out / f"{name}.layer{l}.lmcm")
    print(format_reports(reports))
    return EXIT_OK if all(r.passed for r in reports if r.gating) else EXIT_FAIL


def _fault_injection_report(net, order):
    """Switch on one forbidden first-layer bit and confirm the causality check notices."""
    first = net.masks_for(order)[0]
    bits = first.bits.copy()
    r, c = order[1]
    bits[first.kernel_area // 2, r * net.config.width + c] = 1  # a pixel reading itself
    corrupted = Network(net.config, net.params)
    key = (order.key, "first", first.k1, first.k2, first.dilation, first.in_channels)
    corrupted.mask_cache._store[key] = first.with_bits(bits)
    rep = causality_jacobian_check(corrupted, order)
    return Report("fault_injection", not rep.passed, {"detected": not rep.passed, **rep.details})


def cmd_bench(args):
    r, s = bench.layer_benchmark(batch=args.batch, channels=args.channels, size=args.size)
    print(bench.report(r, s, "layer"))
    r, s = bench.network_benchmark(batch=args.batch, size=args.size, hidden=args.channels)
    print(bench.report(r, s, "network"))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="lmconv", description="Locally masked convolutional density models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="order-agnostic maximum-likelihood training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test-set NLL per order and for the order ensemble")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--orders", help="e.g. s0..s7,hilbert,raster (default: training orders)")
    e.add_argument("--ensemble", action="store_true")
    e.add_argument("--config", help="dataset config overriding the one stored in the checkpoint")
    e.add_argument("--limit", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="ancestral sampling along one order")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--order", default="s0")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--cols", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("complete", help="fill a hidden region with a maximum-context order")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--mask", required=True, help="hidden region: top|bottom|left|right|file:<pbm>")
    c.add_argument("--input", help="PGM/PPM image (default: test split of the checkpoint dataset)")
    c.add_argument("--config")
    c.add_argument("--index", type=int, default=0)
    c.add_argument("--n", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--temperature", type=float, default=1.0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_complete)

    v = sub.add_parser("verify", help="causality, blind-spot and normalisation checks")
    v.add_argument("--ckpt")
    v.add_argument("--orders")
    v.add_argument("--size", type=int, nargs=2, default=(6, 6), metavar=("H", "W"))
    v.add_argument("--hidden", type=int, default=8)
    v.add_argument("--depth", type=int, default=4)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault", action="store_true", help="also confirm a corrupted mask is caught")
    v.add_argument("--dump-masks", metavar="DIR")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="memory/time of recomputing vs. storing patches")
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--channels", type=int, default=32)
    b.add_argument("--size", type=int, default=28)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericFailure as exc:
        print(f"error: numeric failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        field = f" (field {exc.field})" if exc.field else ""
        print(f"error: {exc}{field}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidArgument, FormatError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
