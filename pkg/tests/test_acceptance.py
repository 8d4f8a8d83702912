"""Acceptance criteria 1-8, one test each, each printing a single PASS/FAIL line."""

import time

import numpy as np
import pytest

from hsrnet.autodiff import AdamState, Parameter, Tensor, ops
from hsrnet.autodiff import checkpoint as ckpt
from hsrnet.autodiff.gradcheck import gradcheck
from hsrnet.data import synth_dataset
from hsrnet.density import Adaptive, Fixed, PointAnnotations, make_density, make_pyramid
from hsrnet.fileio import read_dmap, read_points, write_dmap, write_points
from hsrnet.model import HSRNet, ModelConfig, forward, init_parameters, regroup_sets
from hsrnet.objectives import game, scale_consistency_loss
from hsrnet.pipeline import TrainConfig, ablate, evaluate, train, write_ablation

OP_TOL, E2E_TOL = 1e-3, 1e-2
SEEDS = range(10)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def _away_from_zero(rng, *shape):
    x = rng.standard_normal(shape)
    return t64(x + 0.1 * np.sign(x))


def _distinct(rng, *shape):
    return t64(rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 + rng.uniform(0, 0.01))


def _op_cases(rng):
    """(name, fn, inputs) for every differentiable op."""
    r = lambda *s: t64(rng.standard_normal(s))  # noqa: E731
    target = rng.standard_normal((1, 2, 3, 3))
    return [
        ("conv2d", lambda x, w, b: ops.conv2d(x, w, b, 1, 1), [r(2, 3, 6, 5), r(4, 3, 3, 3), r(4)]),
        ("conv2d/s2", lambda x, w: ops.conv2d(x, w, None, 2, 1), [r(1, 2, 7, 6), r(3, 2, 3, 3)]),
        ("transposed_conv2d", lambda x, w: ops.transposed_conv2d(x, w, 2, 1), [r(1, 2, 3, 4), r(2, 3, 4, 4)]),
        ("linear", ops.linear, [r(2, 5, 1, 1), r(3, 5), r(3)]),
        ("broadcast_mul/c", ops.broadcast_mul, [r(2, 3, 4, 4), r(2, 3, 1, 1)]),
        ("broadcast_mul/s", ops.broadcast_mul, [r(2, 3, 4, 4), r(2, 1, 4, 4)]),
        ("add", ops.add, [r(1, 2, 3, 3), r(1, 2, 3, 3)]),
        ("scale", lambda x: ops.scale(x, -1.7), [r(1, 2, 3, 3)]),
        ("max_pool2", ops.max_pool2, [_distinct(rng, 1, 2, 4, 6)]),
        ("avg_pool", lambda x: ops.avg_pool(x, 3), [r(1, 2, 7, 5)]),
        ("global_avg_pool", ops.global_avg_pool, [r(2, 3, 4, 5)]),
        ("channel_mean", ops.channel_mean, [r(2, 3, 4, 5)]),
        ("relu", ops.relu, [_away_from_zero(rng, 1, 2, 4, 4)]),
        ("sigmoid", ops.sigmoid, [r(1, 2, 4, 4)]),
        ("softplus", ops.softplus, [r(1, 2, 4, 4)]),
        ("channel_slice_concat", lambda a, b: ops.channel_slice_concat([a, b, a], [2, 0, 1]),
         [r(1, 3, 4, 4), r(1, 2, 4, 4)]),
        ("concat_channels", lambda a, b: ops.concat_channels([a, b]), [r(1, 1, 3, 3), r(1, 2, 3, 3)]),
        ("bilinear_upsample", lambda x: ops.bilinear_upsample(x, 7, 9), [r(1, 2, 3, 5)]),
        ("half_sq_error", lambda p: ops.half_sq_error(p, target, 9.0), [r(1, 2, 3, 3)]),
    ]


def _e2e_error(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(seed=seed, stage_widths=(4, 4, 8, 8, 8), convs_per_stage=(1, 1, 1, 1, 1), ratio_r=2)
    params = init_parameters(cfg, np.float64)
    for name, p in params.items():
        if not name.startswith(("stage", "loss")):
            p.data = rng.normal(0, 0.3, size=p.shape)
    names = list(params)
    x = Parameter("x", rng.random((1, 3, 16, 16)), dtype=np.float64)
    gt = rng.random((1, 1, 16, 16)) * 0.1
    pyr = [rng.random((1, 1, 16, 16)) * 0.1 for _ in range(5)]

    def objective(x, *ps):
        table = dict(zip(names, ps))
        return scale_consistency_loss(forward(x, table, cfg), gt, pyr, table)[0]

    return gradcheck(objective, [x] + [params[n] for n in names], rng, n_coords=150, step=1e-6).max_rel_error


def test_criterion_1_gradient_suite(criterion):
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for name, fn, inputs in _op_cases(rng):
            step = 1e-3 if name == "max_pool2" else 1e-6
            err = gradcheck(fn, inputs, rng, step=step).max_rel_error
            if err >= worst_op:
                worst_op, worst_name = err, name
    worst_e2e = max(_e2e_error(seed) for seed in SEEDS)
    elapsed = time.perf_counter() - start
    ok = worst_op < OP_TOL and worst_e2e < E2E_TOL and elapsed < 120
    assert criterion(1, ok, f"worst per-op rel err {worst_op:.2e} ({worst_name}) < 1e-3, "
                            f"end-to-end {worst_e2e:.2e} < 1e-2, 10 seeds, {elapsed:.1f}s < 120s")


def test_criterion_2_count_conservation(criterion):
    rng = np.random.default_rng(2024)
    worst_count, worst_pyr = 0.0, 0.0
    for i in range(100):
        n = int(rng.integers(1, 101))
        h, w = (int(v) for v in rng.choice([32, 48, 64, 80], size=2))
        pts = rng.uniform(0, 1, size=(n, 2)) * [w, h]
        mode = Adaptive() if i % 2 == 0 else Fixed(float(rng.uniform(0.5, 8.0)))
        d = make_density(PointAnnotations(pts, w, h), mode)
        src = d.sum(dtype=np.float64)
        worst_count = max(worst_count, abs(src - n))
        for level in make_pyramid(d).maps:
            worst_pyr = max(worst_pyr, abs(level.sum(dtype=np.float64) - src) / src)
    ok = worst_count < 1e-4 and worst_pyr <= 0.02
    assert criterion(2, ok, f"max |sum - count| {worst_count:.2e} < 1e-4 over 100 sets, "
                            f"max pyramid drift {100 * worst_pyr:.4f}% <= 2%")


def _oracle(e):
    sets = []
    for j in range(5):
        members = [t for t in e if t.shape[1] > j]
        n, _, h, w = members[0].shape
        out = np.empty((n, len(members), h, w), dtype=members[0].dtype)
        for slot, t in enumerate(members):
            for b in range(n):
                for y in range(h):
                    for x in range(w):
                        out[b, slot, y, x] = t[b, j, y, x]
        sets.append(out)
    return sets


def test_criterion_3_regroup_oracle(criterion):
    rng = np.random.default_rng(3)
    exact, sizes = 0, None
    for _ in range(50):
        n, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        e = [rng.standard_normal((n, c, h, w)).astype(np.float32) for c in (2, 3, 4, 5)]
        got = regroup_sets([Tensor(a) for a in e])
        sizes = [g.shape[1] for g in got]
        exact += all(g.data.tobytes() == o.tobytes() for g, o in zip(got, _oracle(e))) and sizes == [4, 4, 3, 2, 1]
    assert criterion(3, exact == 50, f"{exact}/50 random E-tuples bit-exact vs index-loop oracle, "
                                     f"set sizes {sizes}")


def test_criterion_4_resolution_contract(criterion):
    model = HSRNet(ModelConfig())
    rng = np.random.default_rng(4)
    checked = bad = 0
    for h in (32, 64, 96):
        for w in (32, 64, 96):
            out = model(Tensor(rng.random((1, 3, h, w))))
            for d in [out.d0] + out.side:
                checked += 1
                bad += d.shape != (1, 1, h, w)
    ok = bad == 0 and checked == 9 * 6
    assert criterion(4, ok, f"{checked - bad}/{checked} outputs (D0..D5 x 9 sizes) at input resolution")


def test_criterion_5_metric_identities(criterion):
    gt = np.zeros((4, 4))
    gt[::2, ::2] = 1.0
    pred = np.zeros((4, 4))
    pred[0, 0] = 4.0
    hand = game(pred, gt, 1)

    rng = np.random.default_rng(5)
    monotone = 0
    for _ in range(100):
        h, w = int(rng.integers(1, 50)), int(rng.integers(1, 50))
        a, b = rng.random((h, w)), rng.random((h, w))
        g = [game(a, b, level) for level in range(4)]
        monotone += all(y >= x - 1e-9 for x, y in zip(g, g[1:]))

    data = synth_dataset(12, "gradient", seed=5)
    reports = [evaluate(HSRNet(ModelConfig(seed=s)), data, bins=4) for s in range(3)]
    game0_gap = max(abs(r.game[0] - r.mae) for r in reports)
    mse_ok = all(r.mse >= r.mae and all(b["mse"] >= b["mae"] for b in r.bins) for r in reports)
    ok = hand == 6.0 and monotone == 100 and game0_gap < 1e-9 and mse_ok
    assert criterion(5, ok, f"4x4 GAME(1) example = {hand:g}, monotone on {monotone}/100 pairs, "
                            f"|GAME(0) - MAE| {game0_gap:.1e}, MSE >= MAE on all sets: {mse_ok}")


def _overfit(seed):
    sample = synth_dataset(1, "sparse", seed=seed)
    cfg = TrainConfig(lr=1e-3, epochs=500, seed=seed).with_model(seed=seed)
    res = train(cfg, sample)
    first, last = res.history[0].l0, res.history[-1].l0
    pred = float(res.model(Tensor(sample[0].image[None])).d0.data.sum(dtype=np.float64))
    true = sample[0].count
    passed = last <= first / 10 and abs(pred - true) <= 0.2 * true
    return passed, first / last, pred, true


@pytest.mark.slow
def test_criterion_6_overfit_smoke(criterion):
    start = time.perf_counter()
    runs = [_overfit(seed) for seed in range(3)]
    elapsed = time.perf_counter() - start
    wins = sum(r[0] for r in runs)
    detail = ", ".join(f"seed {i}: L0 drop {r[1]:.1f}x count {r[2]:.2f}/{r[3]}" for i, r in enumerate(runs))
    ok = wins >= 2 and elapsed < 300
    assert criterion(6, ok, f"{wins}/3 seeds pass (need 2); {detail}; {elapsed:.0f}s < 300s")


@pytest.mark.slow
def test_criterion_7_ablation_harness(criterion, tmp_path):
    wins, notes = 0, []
    for seed in range(3):
        data = synth_dataset(50, "gradient", seed=seed)
        base = TrainConfig(lr=1e-3, epochs=6, seed=seed).with_model(seed=seed)
        rows = ablate(base, "components", data, bins=5)
        report = tmp_path / f"components_{seed}.csv"
        write_ablation(report, rows)
        assert len(report.read_text().splitlines()) == 1 + 6
        by_name = {r.name: r.final_l0 for r in rows}
        full, backbone = by_name["+SRM+CF+SF+SC"], by_name["backbone"]
        wins += full <= backbone
        notes.append(f"seed {seed}: full {full:.2e} vs backbone {backbone:.2e}")
    assert criterion(7, wins >= 2, f"6-row report per seed; full <= backbone final-step L0 on {wins}/3 seeds "
                                   f"(need 2); " + ", ".join(notes))


def test_criterion_8_determinism_and_roundtrips(criterion, tmp_path):
    rng = np.random.default_rng(8)
    model = HSRNet(ModelConfig(seed=8))
    state = AdamState(t=3, m={k: rng.standard_normal(v.shape).astype(np.float32) for k, v in model.params.items()},
                      v={k: rng.random(v.shape).astype(np.float32) for k, v in model.params.items()})
    ckpt.save(tmp_path / "c.hsrc", model.state_dict(), state)
    params, back = ckpt.load(tmp_path / "c.hsrc")
    ckpt_ok = (all(params[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())
               and all(back.m[k].tobytes() == state.m[k].tobytes() for k in state.m)
               and ckpt.dumps(params, back) == (tmp_path / "c.hsrc").read_bytes())

    data = synth_dataset(4, "dense", seed=8)
    cfg = TrainConfig(lr=1e-3, epochs=2, checkpoint_every=3, seed=8).with_model(
        stage_widths=(4, 4, 8, 8, 8), convs_per_stage=(1, 1, 1, 1, 1), ratio_r=4)
    train(cfg, data, tmp_path / "full")
    train(cfg, data, tmp_path / "resumed", resume=tmp_path / "full" / "ckpt_000003.hsrc")
    resume_ok = (tmp_path / "full" / "model.hsrc").read_bytes() == (tmp_path / "resumed" / "model.hsrc").read_bytes()

    d = rng.random((32, 32)).astype(np.float32)
    write_dmap(tmp_path / "m.dmap", d)
    dmap_ok = read_dmap(tmp_path / "m.dmap").tobytes() == d.tobytes()
    pts = rng.uniform(0, 1000, size=(50, 2))
    write_points(tmp_path / "p.csv", pts)
    csv_ok = read_points(tmp_path / "p.csv").tobytes() == pts.tobytes()

    ok = ckpt_ok and resume_ok and dmap_ok and csv_ok
    assert criterion(8, ok, f"checkpoint bit-exact {ckpt_ok}, resume byte-identical {resume_ok}, "
                            f"DMAP exact {dmap_ok}, CSV exact {csv_ok}")
