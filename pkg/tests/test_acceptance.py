"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary."""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from deepmatch import io
from deepmatch import training as T
from deepmatch.autograd import Model, gradcheck
from deepmatch.cli import main
from deepmatch.geometry import Discretization, LevelGeometry, next_range, pool_params, range_sequence
from deepmatch.matching import FlowField, accuracy_at, epe
from deepmatch.pipeline import match_pair
from deepmatch.selftest import oracle_suite
from deepmatch.synthetic import SyntheticSpec, generate_pair


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


MATCH_DISC = Discretization(levels=4, R0=20)


def test_criterion_1_decoder_oracle_equivalence():
    t0 = time.perf_counter()
    res = oracle_suite(200, seed=0)
    elapsed = time.perf_counter() - t0
    mismatched = len(res.failures)
    report(1, "decoder equals path-enumeration oracle", mismatched == 0 and res.total == 200 and elapsed < 30,
           f"{res.total} pyramids, {mismatched} with mismatched cells, {elapsed:.1f}s (limit 30s)")


def test_criterion_2_gradient_correctness():
    t0 = time.perf_counter()
    reports = [gradcheck(seed=s, tolerance=1e-4, n_weights=64) for s in range(20)]
    elapsed = time.perf_counter() - t0
    passed = sum(r.passed for r in reports)
    worst = max(max(r.max_rel_error.values()) for r in reports if r.max_rel_error)
    groups_ok = all({"nu_1", "nu_2", "descriptor_weights"} <= set(r.max_rel_error) for r in reports)
    report(2, "analytic gradients match central differences", passed == 20 and groups_ok and elapsed < 120,
           f"{passed}/20 tie-free instances pass, worst relative error {worst:.2e} (limit 1e-4), "
           f"{elapsed:.1f}s (limit 120s)")


def test_criterion_3_identity_matching(textured128):
    res = match_pair(textured128, textured128, Model.default(4), MATCH_DISC)
    interior = [m for m in res.matches if 0 < m.cell[0] < 15 and 0 < m.cell[1] < 15]
    frac = np.mean([m.q == m.p for m in interior])
    e = epe(res.flow, FlowField.constant(textured128.shape))
    report(3, "identity matching", frac >= 0.95 and e < 0.5,
           f"identity fraction {frac:.4f} over {len(interior)} interior cells (need >= 0.95), EPE {e:.4f} (need < 0.5)")


def test_criterion_4_translation_recovery():
    i0, i1, gt = generate_pair(SyntheticSpec(shape=(128, 128), params=(7, 3), seed=1, max_displacement=20))
    res = match_pair(i0, i1, Model.default(4), MATCH_DISC)
    acc = accuracy_at(res.flow, gt, 1.0)
    report(4, "translation (7,3) recovery", acc >= 0.90, f"accuracy@1 on valid mask {acc:.4f} (need >= 0.90)")


def _pairs(seeds, size=64):
    out = []
    for s in seeds:
        motion = ("translation", "affine", "warp")[s % 3]
        i0, i1, f = generate_pair(SyntheticSpec(shape=(size, size), motion=motion, magnitude=5, seed=s,
                                                max_displacement=8))
        out.append(T.Pair(i0, i1, f))
    return out


def test_criterion_5_training_improves():
    disc = Discretization(levels=3, R0=8)
    train, val = _pairs(range(20)), _pairs(range(100, 105))

    model = Model.default(3, descriptor="trainable", seed=0)
    v0 = T.validation_loss(val, model, disc, 8.0)
    acc0, _ = T.evaluate(val, model, disc)
    state, _ = T.train(train, T.TrainConfig(epochs=2, sigma=8.0), model, disc)
    v1 = T.validation_loss(val, state.model, disc, 8.0)
    acc1, _ = T.evaluate(val, state.model, disc)
    reduction = 1 - v1 / v0
    drop = acc0 - acc1

    fixed = Model.default(3)
    losses = [T.validation_loss(train, fixed, disc, 8.0)]

    def record(st, _value):
        if st.step <= 10:
            losses.append(T.validation_loss(train, st.model, disc, 8.0))

    T.train(train, T.TrainConfig(epochs=1, sigma=8.0, train_descriptors=False), fixed, disc, step_callback=record)
    bad_steps = int(np.sum(np.diff(losses[:11]) >= 0))

    ok = reduction >= 0.20 and drop <= 0.005 and bad_steps <= 2
    report(5, "training improves matching", ok,
           f"val loss {v0:.3f} -> {v1:.3f} ({100 * reduction:.1f}% reduction, need >= 20%), "
           f"val acc@2 {acc0:.4f} -> {acc1:.4f} (drop {drop:+.4f}, limit 0.005), "
           f"exponents-only non-monotone steps {bad_steps}/10 (limit 2)")


def test_criterion_6_loss_calibration():
    g = LevelGeometry(level=0, R=2, H=4, W=4)
    rng = np.random.default_rng(0)
    kstar = rng.integers(0, 5, (4, 4, 2))
    gt = T.GroundTruthField(kstar, np.ones((4, 4), bool), g, 1.5)
    zero, _ = T.structured_loss(gt.margins(), gt)
    uniform, _ = T.structured_loss(np.full((4, 4, 5, 5), 0.25), gt)
    expect = float(np.sum(1 - gt.margins()))
    ok = abs(zero) <= 1e-9 and abs(uniform - expect) <= 1e-9
    report(6, "loss calibration on a 4x4 grid", ok,
           f"indicator loss {zero:.3e}, uniform loss {uniform:.12f} vs {expect:.12f} (tolerance 1e-9)")


def test_criterion_7_discretization_identities():
    window = pool_params(LevelGeometry(level=0, R=80, eta0=1, gamma0=1))[0]
    seq = range_sequence(80, 6)
    identity = []
    for R in seq[:-1]:
        w, _, lo, hi = pool_params(LevelGeometry(level=0, R=R))
        identity.append(2 * R + 1 + lo + hi == 2 * (2 * next_range(R) + 1) + w - 2)
    ok = window == 3 and seq == [80, 40, 20, 10, 5, 3, 2] and all(identity)
    report(7, "discretization identities", ok,
           f"pool window {window}, ranges {seq}, extent identity holds for {sum(identity)}/{len(identity)} transitions")


def _mutations(rng, base: bytes, n: int):
    for _ in range(n):
        kind = rng.integers(4)
        data = bytearray(base)
        if kind == 0:
            data = data[: rng.integers(0, len(data))]
        elif kind == 1:
            for _ in range(rng.integers(1, 6)):
                data[rng.integers(0, min(len(data), 24))] = rng.integers(0, 256)
        elif kind == 2:
            data = bytearray(rng.integers(0, 256, rng.integers(0, 40), dtype=np.uint8).tobytes())
        else:
            data += rng.integers(0, 256, rng.integers(1, 5), dtype=np.uint8).tobytes()
        yield bytes(data)


def test_criterion_8_format_fidelity(tmp_path):
    rng = np.random.default_rng(8)
    gray = rng.integers(0, 256, (16, 16), dtype=np.uint8)
    color = rng.integers(0, 256, (9, 11, 3), dtype=np.uint8)
    flow = FlowField(rng.normal(scale=20, size=(10, 12)), rng.normal(scale=20, size=(10, 12)), rng.random((10, 12)) > 0.1)
    io.write_image(tmp_path / "g.pgm", gray)
    io.write_image(tmp_path / "c.ppm", color)
    io.write_flow(tmp_path / "f.flo", flow)
    back = io.read_flow(tmp_path / "f.flo")
    round_ok = (
        np.array_equal(io.read_image(tmp_path / "g.pgm").pixels[..., 0], gray)
        and np.array_equal(io.read_image(tmp_path / "c.ppm").pixels, color)
        and np.array_equal(back.valid, flow.valid)
        and np.array_equal(back.u[flow.valid], flow.u[flow.valid].astype(np.float32))
        and np.array_equal(back.v[flow.valid], flow.v[flow.valid].astype(np.float32))
    )
    bases = [io.encode_image(io.ImageBuffer(gray)), io.encode_image(io.ImageBuffer(color)), io.encode_flow(flow)]
    typed, crashes = 0, []
    for n in range(10_000):
        base = bases[n % 3]
        data = next(_mutations(rng, base, 1))
        parser = io.parse_flow if n % 3 == 2 else io.parse_image
        try:
            parser(data)
        except io.FormatError:
            typed += 1
        except Exception as exc:  # noqa: BLE001 - any other exception is a crash
            crashes.append(f"{type(exc).__name__}: {exc}")
    report(8, "format fidelity", round_ok and not crashes,
           f"roundtrips {'exact' if round_ok else 'BROKEN'}, 10000 fuzzed files: {typed} typed parse errors, "
           f"{10_000 - typed - len(crashes)} parsed, {len(crashes)} crashes")


def test_criterion_9_performance(tmp_path, capsys):
    i0, i1, _ = generate_pair(SyntheticSpec(shape=(128, 128), params=(7, 3), seed=1, max_displacement=20))
    io.write_image(tmp_path / "a.pgm", i0)
    io.write_image(tmp_path / "b.pgm", i1)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("levels = 4\nR0 = 20\ndescriptor = fixed\n")
    t0 = time.perf_counter()
    code_match = main(["match", str(tmp_path / "a.pgm"), str(tmp_path / "b.pgm"), "--config", str(cfg),
                       "--matches", str(tmp_path / "m.txt"), "--flow", str(tmp_path / "m.flo"),
                       "--viz", str(tmp_path / "m.ppm"), "--threads", "1"])
    t_match = time.perf_counter() - t0
    t0 = time.perf_counter()
    code_self = main(["selftest", "--threads", "1"])
    t_self = time.perf_counter() - t0
    capsys.readouterr()
    ok = code_match == 0 and code_self == 0 and t_match < 10 and t_self < 300
    report(9, "performance envelope", ok,
           f"match exit {code_match} in {t_match:.2f}s (limit 10s), selftest exit {code_self} in {t_self:.1f}s "
           f"(limit 300s)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
