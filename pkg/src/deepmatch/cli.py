"""Command-line entry point: ``deepmatch {match,train,eval,selftest,gen,visualize}``."""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import io, matching, selftest, training
from .autograd import Model
from .config import ConfigError, RunConfig, load_config
from .descriptors import ExtractorParams
from .geometry import GeometryError, grid_positions
from .pipeline import match_pair
from .synthetic import SyntheticError, SyntheticSpec, generate_pair

EXIT_OK, EXIT_PROPERTY, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3
THRESHOLDS = (1, 2, 5, 10)
PAIR_NAME = re.compile(r"^(\d+)_img0\.p[gp]m$")

log = logging.getLogger("deepmatch")


class IOFailure(Exception):
    pass


def _read_image(path: str) -> np.ndarray:
    try:
        return io.read_image(path).pixels
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror}") from None
    except io.FormatError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from None


def _read_flow(path: str) -> matching.FlowField:
    try:
        return io.read_flow(path)
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror}") from None
    except io.FormatError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from None


def _write(fn, path, payload):
    try:
        fn(path, payload)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror}") from None


def build_model(cfg: RunConfig, checkpoint: str | None = None) -> Model:
    if checkpoint:
        try:
            model = training.load_checkpoint(checkpoint).model
        except OSError as exc:
            raise IOFailure(f"cannot read {checkpoint}: {exc.strerror}") from None
        except training.CheckpointError as exc:
            raise IOFailure(f"cannot read {checkpoint}: {exc}") from None
        if len(model.exponents) != cfg.levels:
            raise ConfigError(
                f"checkpoint holds {len(model.exponents)} exponents but the config asks for {cfg.levels} levels"
            )
        return model
    ext = ExtractorParams.init(cfg.seed) if cfg.descriptor == "trainable" else None
    return Model(np.array(cfg.exponents(), dtype=np.float64), ext)


def load_dataset(directory: str) -> list[training.Pair]:
    try:
        names = sorted(os.listdir(directory))
    except OSError as exc:
        raise IOFailure(f"cannot read dataset {directory}: {exc.strerror}") from None
    pairs = []
    for name in names:
        m = PAIR_NAME.match(name)
        if not m:
            continue
        stem = os.path.join(directory, m.group(1))
        ext = name[-4:]
        img0 = _read_image(stem + "_img0" + ext)
        img1 = _read_image(stem + "_img1" + ext)
        flow = _read_flow(stem + "_flow.flo")
        if img0.shape[:2] != img1.shape[:2] or flow.shape != img0.shape[:2]:
            raise IOFailure(f"cannot read pair {stem}: image and flow extents differ")
        pairs.append(training.Pair(img0, img1, flow))
    if not pairs:
        raise IOFailure(f"cannot read dataset {directory}: no NNNN_img0.pgm files found")
    return pairs


def cmd_match(args, cfg: RunConfig) -> int:
    img0 = _read_image(args.image0)
    img1 = _read_image(args.image1)
    if img0.shape[:2] != img1.shape[:2]:
        raise IOFailure("cannot read the pair: images have different extents")
    model = build_model(cfg, args.checkpoint or cfg.checkpoint or None)
    t0 = time.perf_counter()
    res = match_pair(img0, img1, model, cfg.discretization(), cfg.radius, cfg.confidence_first)
    elapsed = time.perf_counter() - t0
    try:
        with open(args.matches, "w", encoding="utf-8") as f:
            f.write(res.matches.to_text())
    except OSError as exc:
        raise IOFailure(f"cannot write {args.matches}: {exc.strerror}") from None
    _write(io.write_flow, args.flow, res.flow)
    mag = cfg.max_magnitude
    if mag <= 0:
        sel = res.flow.valid
        mag = float(np.hypot(res.flow.u[sel], res.flow.v[sel]).max()) if sel.any() else 1.0
        mag = max(mag, 1.0)
    _write(io.write_image, args.viz, io.flow_to_color(res.flow, mag))
    if args.dump_slice:
        r, c = args.dump_slice
        q0 = res.q0
        if not (0 <= r < q0.shape[0] and 0 <= c < q0.shape[1]):
            raise ConfigError(f"slice cell ({r}, {c}) outside the {q0.shape[0]}x{q0.shape[1]} reference grid")
        _write(io.write_image, args.slice_out, io.score_slice_image(q0[r, c]))
    verified = sum(m.verified for m in res.matches)
    print(f"matches {len(res.matches)} verified {verified} "
          f"dense {int(res.flow.valid.sum())}/{res.flow.valid.size} time {elapsed:.2f}s")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    dataset = load_dataset(args.dataset or cfg.dataset)
    validation = load_dataset(args.validation) if args.validation else None
    tcfg = cfg.train_config()
    disc = cfg.discretization()
    if args.resume:
        try:
            state = training.load_checkpoint(args.resume)
        except (OSError, training.CheckpointError) as exc:
            raise IOFailure(f"cannot read {args.resume}: {exc}") from None
        model = state.model
    else:
        model = build_model(cfg)
        state = training.TrainState(model)
    try:
        state, rows = training.train(dataset, tcfg, model, disc, validation, args.out, args.log, state)
    except training.TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROPERTY
    training.save_checkpoint(args.out, state)
    for row in rows:
        print(f"epoch {row.epoch:3d} step {row.step:6d} loss {row.loss:.6g} "
              f"val_acc2 {row.val_acc2:.4f} val_epe {row.val_epe:.4f}")
    print(f"checkpoint {args.out} epoch {state.epoch} step {state.step}")
    return EXIT_OK


def _identity_matches(shape, cfg: RunConfig) -> matching.MatchSet:
    geom = cfg.discretization().level_geometries(shape)[0]
    rows, cols = grid_positions(geom)
    out = matching.MatchSet()
    for r, y in enumerate(rows):
        for c, x in enumerate(cols):
            p = (int(x), int(y))
            out.append(matching.Match(p, p, 1.0, True, (r, c)))
    return out


def evaluate_dataset(pairs, cfg: RunConfig, estimator: str, model: Model | None = None) -> dict[str, list[float]]:
    """Per-variant metric rows ``[acc@1, acc@2, acc@5, acc@10, EPE]`` averaged over pairs."""
    acc = {"flow": [], "matches": []}
    for pair in pairs:
        shape = pair.image0.shape[:2]
        if estimator == "identity":
            flow = matching.FlowField.constant(shape)
            matches = _identity_matches(shape, cfg)
        else:
            res = match_pair(pair.image0, pair.image1, model, cfg.discretization(), cfg.radius,
                             cfg.confidence_first)
            flow, matches = res.flow, res.matches
        acc["flow"].append([matching.accuracy_at(flow, pair.flow, t) for t in THRESHOLDS]
                           + [matching.epe(flow, pair.flow)])
        mask = matching.match_mask(matches, shape) & pair.flow.valid
        if mask.any():
            sparse = matching.match_flow(matches, shape)
            acc["matches"].append([matching.accuracy_at(sparse, pair.flow, t, mask) for t in THRESHOLDS]
                                  + [matching.epe(sparse, pair.flow, mask)])
    return {k: list(np.mean(v, axis=0)) for k, v in acc.items() if v}


def format_table(table: dict[str, list[float]]) -> str:
    head = f"{'variant':<10}" + "".join(f"{'acc@' + str(t):>10}" for t in THRESHOLDS) + f"{'EPE':>10}"
    lines = [head]
    for name, row in table.items():
        lines.append(f"{name:<10}" + "".join(f"{v:>10.4f}" for v in row))
    return "\n".join(lines)


def cmd_eval(args, cfg: RunConfig) -> int:
    pairs = load_dataset(args.dataset or cfg.dataset)
    model = None
    if args.estimator == "deepmatch":
        model = build_model(cfg, args.checkpoint or cfg.checkpoint or None)
    print(format_table(evaluate_dataset(pairs, cfg, args.estimator, model)))
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig) -> int:
    suites = [
        selftest.oracle_suite(args.oracle_count, cfg.seed),
        selftest.gradcheck_suite(args.gradcheck_count, cfg.seed),
    ]
    status = EXIT_OK
    for suite in suites:
        verdict = "PASS" if suite.passed else "FAIL"
        print(f"{verdict} {suite.name}: {suite.total - len(suite.failures) - suite.skipped}/{suite.total} ok"
              + (f", {suite.skipped} skipped on ties" if suite.skipped else ""))
        for line in suite.failures:
            print(f"  failing property: {line}")
        if not suite.passed:
            status = EXIT_PROPERTY
    return status


def cmd_gen(args, cfg: RunConfig) -> int:
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot write {args.out}: {exc.strerror}") from None
    count = cfg.gen_count if args.count is None else args.count
    for n in range(count):
        spec = SyntheticSpec(shape=(cfg.gen_height, cfg.gen_width), texture=cfg.gen_texture,
                             motion=cfg.gen_motion, magnitude=cfg.gen_magnitude,
                             seed=cfg.seed + n, max_displacement=cfg.R0)
        img0, img1, flow = generate_pair(spec)
        stem = os.path.join(args.out, f"{n:04d}")
        _write(io.write_image, stem + "_img0.pgm", img0)
        _write(io.write_image, stem + "_img1.pgm", img1)
        _write(io.write_flow, stem + "_flow.flo", flow)
    print(f"wrote {count} pairs to {args.out}")
    return EXIT_OK


def cmd_visualize(args, cfg: RunConfig) -> int:
    flow = _read_flow(args.flow)
    mag = args.max_magnitude or cfg.max_magnitude
    if mag <= 0:
        sel = flow.valid
        mag = max(float(np.hypot(flow.u[sel], flow.v[sel]).max()) if sel.any() else 1.0, 1e-6)
    _write(io.write_image, args.out, io.flow_to_color(flow, mag))
    print(f"wrote {args.out} (max magnitude {mag:g})")
    return EXIT_OK


def _cell(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected ROW,COL") from None
    return r, c


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 is bit-reproducible")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deepmatch", description="Dense correspondence by score pyramids.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", parents=[common], help="match one image pair")
    p.add_argument("image0")
    p.add_argument("image1")
    p.add_argument("--matches", default="matches.txt")
    p.add_argument("--flow", default="flow.flo")
    p.add_argument("--viz", default="flow.ppm")
    p.add_argument("--checkpoint")
    p.add_argument("--dump-slice", type=_cell, metavar="ROW,COL",
                   help="also write the score slice of one reference cell as a PGM")
    p.add_argument("--slice-out", default="slice.pgm")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", parents=[common], help="train exponents and descriptors")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--validation")
    p.add_argument("--log", help="CSV log path")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy@T and EPE over a dataset")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--checkpoint")
    p.add_argument("--estimator", choices=("deepmatch", "identity"), default="deepmatch")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", parents=[common], help="oracle equivalence and gradient checks")
    p.add_argument("--oracle-count", type=int, default=200)
    p.add_argument("--gradcheck-count", type=int, default=20)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p.add_argument("out")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("visualize", parents=[common], help="color-code a .flo file")
    p.add_argument("flow")
    p.add_argument("out")
    p.add_argument("--max-magnitude", type=float, default=0.0)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=max(args.threads, 1)):
            return args.func(args, cfg)
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, GeometryError, SyntheticError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
