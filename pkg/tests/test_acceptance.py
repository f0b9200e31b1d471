"""Acceptance criteria 1-8, each at its stated tolerance.

Each check prints one ``[PASS]``/``[FAIL]`` line (collected in the pytest
terminal summary). Run directly with ``python tests/test_acceptance.py``
to get just those lines.
"""

import contextlib
import io
import math
import sys
import time
from pathlib import Path

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from dfgp import cli
from dfgp.baseline import seasonal_naive
from dfgp.data import FeatureSpec, SynthConfig, build_features, load_long_csv, split_train_eval, synth_generate
from dfgp.gp import KernelParams, gp_nll, gp_posterior
from dfgp.autodiff import Tensor
from dfgp.linalg import cho_solve, cholesky
from dfgp.metrics import interval_coverage, normalized_quantile_loss, quantile_loss, rmse
from dfgp.model import ModelConfig, forecast, gaussian_quantile, init_model_params, train

FIXTURE = Path(__file__).parent / "fixtures" / "electricity_10d.csv"


def line(number, passed, detail):
    return f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"


def scored(split, params):
    res = forecast(params, split)
    mean = np.array([r.mean for r in res])
    q = {k: np.array([r.quantile_values[k] for r in res]) for k in (0.1, 0.5, 0.9)}
    return mean, q


# ---------------------------------------------------------------- 1


def criterion_1():
    start = time.perf_counter()
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(["gradcheck", "--seed", "0"])
    elapsed = time.perf_counter() - start
    report = buf.getvalue().splitlines()
    errors = [float(r.split("max_rel_err=")[1].split()[0]) for r in report if "max_rel_err=" in r]
    seeds = int(report[-1].split("seeds=")[1].split()[0])
    ok = code == 0 and len(errors) == 4 and max(errors) < 1e-4 and seeds >= 20 and elapsed < 60
    return ok, (f"dfgp gradcheck exit {code} over {seeds} seeds, worst relative error {max(errors):.2e} "
                f"< 1e-4 across {len(errors)} groups, {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------- 2


def criterion_2():
    start = time.perf_counter()
    rng = np.random.default_rng(20240)
    worst = 0.0
    instances = 60
    for _ in range(instances):
        n, m = int(rng.integers(1, 33)), int(rng.integers(1, 12))
        x, r, xs = np.sort(rng.uniform(size=n)), rng.normal(size=n), rng.uniform(-0.3, 1.3, size=m)
        a, ell, sigma = rng.uniform(0.2, 2.0), rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.8)
        p = KernelParams.from_natural(a, ell, sigma)
        k = lambda u, v: a * a * np.exp(-((u[:, None] - v[None, :]) ** 2) / (2 * ell * ell))  # noqa: E731
        Ky = k(x, x) + sigma * sigma * np.eye(n)
        Kinv = np.linalg.inv(Ky)
        nll = 0.5 * r @ Kinv @ r + 0.5 * math.log(np.linalg.det(Ky)) + 0.5 * n * math.log(2 * math.pi)
        Ks = k(x, xs)
        mean = Ks.T @ Kinv @ r
        var = a * a + sigma * sigma - np.einsum("ij,ik,kj->j", Ks, Kinv, Ks)
        post = gp_posterior(x, r, xs, p)
        worst = max(worst, abs(gp_nll(Tensor(r), x, p).item() - nll),
                    np.max(np.abs(post.mean - mean)), np.max(np.abs(post.variance - var)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 30
    return ok, f"{instances} instances n<=32, max |diff| vs dense inverse {worst:.1e} < 1e-8, {elapsed:.2f}s < 30s"


# ---------------------------------------------------------------- 3


def criterion_3():
    rng = np.random.default_rng(33)
    worst = 0.0
    for _ in range(20):
        z, zh = rng.normal(size=40) * 50, rng.normal(size=40) * 50
        rho = float(rng.uniform(0.01, 0.99))
        num = den = sq = 0.0
        for a, b in zip(z, zh):
            ql = 2 * rho * (a - b) if a > b else 2 * (1 - rho) * (b - a)
            worst = max(worst, abs(quantile_loss(a, b, rho) - ql))
            num, den, sq = num + ql, den + abs(a), sq + (a - b) ** 2
        worst = max(worst, abs(normalized_quantile_loss(z, zh, rho) - num / den),
                    abs(rmse(z, zh) - math.sqrt(sq / z.size)))
    worked = (
        normalized_quantile_loss([10.0, 10.0], [8.0, 12.0], 0.5) == 0.2
        and quantile_loss(10.0, 8.0, 0.5) == 2.0
        and abs(quantile_loss(10.0, 12.0, 0.9) - 0.4) < 1e-15
        and quantile_loss(10.0, 10.0, 0.3) == 0.0
        and abs(rmse([0.0, 0.0], [3.0, 4.0]) - 3.53553) < 1e-5
    )
    ok = worst < 1e-12 and worked
    return ok, f"loop oracles max |diff| {worst:.1e} < 1e-12; worked values (P50 pair 0.2, QL 2.0/0.4) {'ok' if worked else 'wrong'}"


# ---------------------------------------------------------------- 4


def criterion_4():
    rng = np.random.default_rng(44)
    recon = resid = 0.0
    for n in (1, 2, 16, 64, 128, 256):
        B = rng.normal(size=(n, n))
        A = B @ B.T + np.eye(n)
        f = cholesky(A)
        target = A + f.jitter_applied * np.eye(n)
        recon = max(recon, np.max(np.abs(f.L @ f.L.T - target)) / np.max(np.abs(target)))
        b = rng.normal(size=n)
        resid = max(resid, np.max(np.abs(A @ cho_solve(f, b) - b)) / np.max(np.abs(b)))
    ok = recon < 1e-10 and resid < 1e-8
    return ok, f"n up to 256: reconstruction {recon:.1e} < 1e-10, solve residual {resid:.1e} < 1e-8"


# ---------------------------------------------------------------- 5

SYNTH_EPOCHS = 500
SYNTH_FACTORS = 2


def criterion_5():
    start = time.perf_counter()
    ds, _ = synth_generate(SynthConfig(n_series=20, length=192, n_factors=2, seed=0))
    split = split_train_eval(ds, 168, 24)
    config = ModelConfig(n_factors=SYNTH_FACTORS, epochs=SYNTH_EPOCHS, train_window=168, horizon=24)
    params, history = train(split, config)
    mean, q = scored(split, params)
    z = split.eval_values
    _, _, naive = seasonal_naive(split.train_values, 24)
    model_p50 = normalized_quantile_loss(z, q[0.5], 0.5)
    naive_p50 = normalized_quantile_loss(z, naive[0.5], 0.5)
    coverage = interval_coverage(z, q[0.1], q[0.9])
    elapsed = time.perf_counter() - start
    improvement = 1.0 - model_p50 / naive_p50
    ok = (history.nll[-1] < history.nll[0] and improvement >= 0.20 and 0.65 <= coverage <= 0.92
          and elapsed < 600)
    return ok, (f"NLL {history.nll[0]:.1f} -> {history.nll[-1]:.1f}; P50QL {model_p50:.4f} vs naive "
                f"{naive_p50:.4f} ({100 * improvement:.1f}% better, need >= 20%); [P10,P90] coverage "
                f"{coverage:.3f} in [0.65, 0.92]; {elapsed:.0f}s < 600s")


# ---------------------------------------------------------------- 6

ELEC_EPOCHS = 300


def criterion_6():
    ds = load_long_csv(FIXTURE)
    parts, ok = [], ds.N >= 10
    for tau in (24, 72):
        split = split_train_eval(ds, 168, tau)
        params, _ = train(split, ModelConfig(epochs=ELEC_EPOCHS, train_window=168, horizon=tau))
        _, q = scored(split, params)
        z = split.eval_values
        _, _, naive = seasonal_naive(split.train_values, tau)
        m50, m90 = normalized_quantile_loss(z, q[0.5], 0.5), normalized_quantile_loss(z, q[0.9], 0.9)
        n50, n90 = normalized_quantile_loss(z, naive[0.5], 0.5), normalized_quantile_loss(z, naive[0.9], 0.9)
        ok = ok and m50 <= n50 and m90 <= n90 and m90 < m50
        parts.append(f"tau={tau}: P50QL {m50:.4f}<={n50:.4f}, P90QL {m90:.4f}<={n90:.4f}, P90<P50")
    return ok, f"{ds.N} series, one-week window; " + "; ".join(parts)


# ---------------------------------------------------------------- 7


def criterion_7(tmp_path):
    cli.main(["synth", "--out", str(tmp_path / "syn")])
    (tmp_path / "run.cfg").write_text("epochs = 25\nn_factors = 3\nhidden_dim = 16\nseed = 11\n")
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        cli.main(["train", "--data", str(tmp_path / "syn/data.csv"), "--config", str(tmp_path / "run.cfg"),
                  "--out", str(d)])
        cli.main(["forecast", "--ckpt", str(d / "model.ckpt"), "--data", str(tmp_path / "syn/data.csv"),
                  "--horizon", "24", "--out", str(d / "forecast.csv")])
        outputs.append(((d / "model.ckpt").read_bytes(), (d / "forecast.csv").read_bytes()))
    same_ckpt = outputs[0][0] == outputs[1][0]
    same_fc = outputs[0][1] == outputs[1][1]
    ok = same_ckpt and same_fc and len(outputs[0][1]) > 0
    return ok, (f"two runs: checkpoint {'byte-identical' if same_ckpt else 'DIFFERS'}, "
                f"forecast {'byte-identical' if same_fc else 'DIFFERS'}")


# ---------------------------------------------------------------- 8


def criterion_8():
    counts = dict.fromkeys(["quantile monotonicity", "scale equivariance", "feature periodicity",
                            "posterior variance bound", "QL homogeneity"], 0)
    run = settings(max_examples=100, deadline=None, database=None)

    @run
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6), st.floats(0, 1e6),
           st.floats(0.001, 0.99), st.floats(1e-4, 0.5))
    def monotone(means, var, r1, gap):
        counts["quantile monotonicity"] += 1
        m = np.array(means)
        v = np.full(m.shape, var)
        assert np.all(gaussian_quantile(m, v, r1) <= gaussian_quantile(m, v, min(r1 + gap, 0.999)))

    ds, _ = synth_generate(SynthConfig(n_series=2, length=30, seed=8))
    split = split_train_eval(ds, 24, 6)
    split.train_values = split.train_values + 4.0
    params = init_model_params(ModelConfig(n_factors=2, hidden_dim=4), split.series_ids, 4)
    base = forecast(params, split)

    @run
    @given(st.floats(1e-2, 1e3))
    def equivariant(c):
        counts["scale equivariance"] += 1
        split_c = split_train_eval(ds, 24, 6)
        split_c.train_values = (split.train_values * c)
        for b, r in enumerate(forecast(params, split_c)):
            np.testing.assert_allclose(r.mean, c * base[b].mean, rtol=1e-12)
            for q in (0.1, 0.5, 0.9):
                np.testing.assert_allclose(r.quantile_values[q], c * base[b].quantile_values[q], rtol=1e-11)

    @run
    @given(st.integers(0, 10**9))
    def periodic(h):
        counts["feature periodicity"] += 1
        t = np.datetime64("1980-01-01T00:00:00") + np.timedelta64(h, "h") + np.arange(5) * np.timedelta64(1, "h")
        hs, ds_ = FeatureSpec(("hour_sin", "hour_cos")), FeatureSpec(("dow_sin", "dow_cos"))
        assert build_features(t, hs).tobytes() == build_features(t + np.timedelta64(24, "h"), hs).tobytes()
        assert build_features(t, ds_).tobytes() == build_features(t + np.timedelta64(7, "D"), ds_).tobytes()

    @run
    @given(st.integers(1, 16), st.floats(0.05, 3), st.floats(0.01, 2), st.floats(1e-3, 2), st.integers(0, 2**31))
    def bounded(n, a, ell, s, seed):
        counts["posterior variance bound"] += 1
        rng = np.random.default_rng(seed)
        post = gp_posterior(rng.uniform(size=n), rng.normal(size=n), rng.uniform(-1, 2, size=5),
                            KernelParams.from_natural(a, ell, s))
        assert np.all(post.variance <= a * a + s * s + 1e-10)

    @run
    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(0.01, 0.99), st.floats(1e-3, 1e3))
    def homogeneous(z, zh, rho, c):
        counts["QL homogeneity"] += 1
        assert math.isclose(quantile_loss(c * z, c * zh, rho), c * quantile_loss(z, zh, rho),
                            rel_tol=1e-12, abs_tol=1e-9)

    failures = []
    for name, fn in zip(counts, (monotone, equivariant, periodic, bounded, homogeneous)):
        try:
            fn()
        except Exception as exc:  # noqa: BLE001
            failures.append(f"{name}: {type(exc).__name__}")
    ok = not failures and all(c >= 100 for c in counts.values())
    detail = ", ".join(f"{k} {v}" for k, v in counts.items())
    return ok, f"cases per property: {detail}" + (f"; failures: {failures}" if failures else "")


# ---------------------------------------------------------------- pytest


def _check(number, acceptance_log, result):
    ok, detail = result
    acceptance_log.append(line(number, ok, detail))
    assert ok, detail


def test_criterion_1_gradient_suite(acceptance_log):
    _check(1, acceptance_log, criterion_1())


def test_criterion_2_gp_oracle(acceptance_log):
    _check(2, acceptance_log, criterion_2())


def test_criterion_3_metric_oracle(acceptance_log):
    _check(3, acceptance_log, criterion_3())


def test_criterion_4_linalg(acceptance_log):
    _check(4, acceptance_log, criterion_4())


def test_criterion_5_synthetic_recovery(acceptance_log):
    _check(5, acceptance_log, criterion_5())


def test_criterion_6_electricity_directional(acceptance_log):
    _check(6, acceptance_log, criterion_6())


def test_criterion_7_determinism(acceptance_log, tmp_path):
    _check(7, acceptance_log, criterion_7(tmp_path))


def test_criterion_8_property_suites(acceptance_log):
    _check(8, acceptance_log, criterion_8())


if __name__ == "__main__":
    import tempfile

    all_ok = True
    for n, fn in enumerate((criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6), 1):
        ok, detail = fn()
        all_ok &= ok
        print(line(n, ok, detail), flush=True)
    with tempfile.TemporaryDirectory() as tmp:
        ok, detail = criterion_7(Path(tmp))
    all_ok &= ok
    print(line(7, ok, detail), flush=True)
    ok, detail = criterion_8()
    all_ok &= ok
    print(line(8, ok, detail), flush=True)
    sys.exit(0 if all_ok else 1)
