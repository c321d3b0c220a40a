"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the phantom
end-to-end criteria (9 and 10) train three small networks twice and take
several minutes on one CPU core.
"""

import math
import time

import numpy as np
import pytest
import torch

from ganda.analysis import euclidean_distance_transform, linear_regression
from ganda.experiment import ExperimentConfig, run_phantom_experiment
from ganda.networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    generator_forward,
    parameter_count,
)
from ganda.slide_io import ChannelPlane, Role, SlideImage
from ganda.tiling import decompose, denormalize, filter_empty, normalize, recompose
from ganda.training import (
    TrainConfig,
    discriminator_loss,
    generator_adversarial_loss,
    make_optimizers,
    pixel_loss,
    total_generator_loss,
    train_step,
)

from oracles import (
    brute_force_edt_vectorized,
    central_differences,
    discriminator_param_oracle,
    generator_param_oracle,
    normal_equations_fit,
    relative_error,
)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def _fuzz_slide(rng, h, w, roles=(Role.NUCLEI, Role.VESSEL, Role.NP), density=0.5):
    chans = []
    for r in roles:
        data = rng.integers(0, 256, (h, w), dtype=np.uint8)
        data[rng.random((h, w)) > density] = 0
        chans.append(ChannelPlane(r, data))
    return SlideImage(chans)


def test_01_tiling_round_trip(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    bad = 0
    for i in range(200):
        h, w = (int(v) for v in rng.integers(1, 1301, 2))
        p = (64, 512)[i % 2]
        s = _fuzz_slide(rng, h, w, roles=(Role.NUCLEI, Role.VESSEL), density=0.8)
        manifest, patches = decompose(s, p)
        for c, role in enumerate(s.roles):
            tiles = {rec.key: patch[..., c] for rec, patch in zip(manifest.records, patches)}
            if not np.array_equal(recompose(manifest, tiles), s.channel(role)):
                bad += 1
    dt = time.perf_counter() - t0
    verdict(1, bad == 0 and dt < 60, f"200 slides, {bad} mismatches, {dt:.1f}s")


def test_02_normalization_identity(verdict):
    v = np.arange(256, dtype=np.uint8)
    n = normalize(v)
    ok = (np.array_equal(denormalize(n), v) and n[0] == -1.0 and n[255] == 1.0
          and n.dtype == np.float32)
    verdict(2, ok, "all 256 values; normalize(0)=-1, normalize(255)=+1")


def test_03_exclusion_rule(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    total = 0
    for i in range(100):
        h, w = (int(v) for v in rng.integers(1, 300, 2))
        p = int(rng.choice([16, 32, 64]))
        s = _fuzz_slide(rng, h, w, density=float(rng.choice([0.0005, 0.01, 0.2])))
        manifest, patches = decompose(s, p)
        flags = [r.included for r in filter_empty(manifest, patches).records]
        nuc = s.channel(Role.NUCLEI).astype(np.int64)
        ves = s.channel(Role.VESSEL).astype(np.int64)
        oracle = []
        for r0 in range(0, h, p):
            for c0 in range(0, w, p):
                total_sum = 0
                for rr in range(r0, min(r0 + p, h)):
                    total_sum += int(nuc[rr, c0:c0 + p].sum()) + int(ves[rr, c0:c0 + p].sum())
                oracle.append(total_sum != 0)
        total += len(oracle)
        mismatches += sum(a != b for a, b in zip(flags, oracle)) + abs(len(flags) - len(oracle))
    verdict(3, mismatches == 0, f"100 slides, {total} tiles, {mismatches} mismatches")


def test_04_architecture(verdict):
    ok = True
    details = []
    for cin in (1, 2):
        g = build_generator(GeneratorSpec(input_channels=cin), 0)
        out = generator_forward(g, np.zeros((1, 512, 512, cin), np.float32))
        ok &= out.shape == (1, 512, 512, 1)
        ok &= parameter_count(g) == generator_param_oracle(cin, (32, 64, 128), 3)
        details.append(f"G[{cin}ch]={parameter_count(g)}")
    dspec = DiscriminatorSpec()
    d = build_discriminator(dspec, 0).eval()
    with torch.no_grad():
        x = torch.zeros(2, 1, 512, 512)
        sizes = [s[0] for s in d.feature_sizes(x)]
        prob = d(x)
    ok &= sizes == [256, 128, 64, 32, 16, 8] and tuple(prob.shape) == (2,)
    ok &= bool(((prob > 0) & (prob < 1)).all())
    ok &= parameter_count(d) == discriminator_param_oracle(1, dspec.conv_filters, 512)
    details.append(f"D sizes={sizes} params={parameter_count(d)}")
    verdict(4, bool(ok), "; ".join(details))


def test_05_losses(verdict):
    errs = []
    errs.append(abs(float(discriminator_loss([0.5], [0.5])) - 2 * math.log(2)))
    errs.append(abs(float(generator_adversarial_loss([0.5])) - math.log(2)))
    ones = torch.ones(1, 1, 512, 512, dtype=torch.float64)
    zeros = torch.zeros_like(ones)
    errs.append(abs(float(pixel_loss(ones, zeros, "L2_NORM")) - 512))
    errs.append(abs(float(pixel_loss(ones, zeros, "MSE")) - 1))
    spec = GeneratorSpec(input_channels=2, contracting_filters=(4,), residual_blocks=0,
                         residual_filters=4, expansive_filters=(4,))
    g = build_generator(spec, 0)
    d = build_discriminator(DiscriminatorSpec(conv_filters=(4,), input_size_px=16), 1)
    rng = np.random.default_rng(0)
    rel = []
    for mode in ("L2_NORM", "MSE"):
        cfg = TrainConfig(pixel_loss_mode=mode)
        opt_g, opt_d = make_optimizers(g, d, cfg)
        for step in range(5):
            x = torch.tensor(rng.uniform(-1, 1, (4, 2, 16, 16)), dtype=torch.float32)
            rec = train_step(g, d, x, x[:, 1:], cfg, opt_g, opt_d, step)
            expect = 10 * rec.g_adv_loss + 10 * rec.g_pix_loss
            rel.append(abs(rec.g_total_loss - expect) / abs(expect))
    ok = max(errs) <= 1e-9 and max(rel) <= 1e-9
    verdict(5, ok, f"max closed-form error {max(errs):.2e}, max total-loss rel error {max(rel):.2e}")


def test_06_gradient_check(verdict):
    t0 = time.perf_counter()
    spec = GeneratorSpec(input_channels=2, contracting_filters=(4,), residual_blocks=0,
                         residual_filters=4, expansive_filters=(4,), boundary_kernel_px=3)
    g = build_generator(spec, 0).double().train()
    d = build_discriminator(DiscriminatorSpec(conv_filters=(2,), input_size_px=8), 1).double()
    cfg = TrainConfig()
    rng = np.random.default_rng(6)
    x = torch.tensor(rng.uniform(-1, 1, (4, 2, 8, 8)), dtype=torch.float64)
    z = torch.tanh(2 * x[:, 1:])

    def loss():
        fake = g(x)
        return total_generator_loss(generator_adversarial_loss(d(fake)),
                                    pixel_loss(fake, z, cfg.pixel_loss_mode), cfg)

    g.zero_grad()
    loss().backward()
    params = list(g.parameters())
    picks = []
    for _ in range(20):
        p = params[int(rng.integers(len(params)))]
        picks.append((p, int(rng.integers(p.numel()))))
    analytic = [p.grad.view(-1)[i].item() for p, i in picks]
    numeric = central_differences(loss, params, [(p.data, i) for p, i in picks])
    worst = max(relative_error(a, f) for a, f in zip(analytic, numeric))
    dt = time.perf_counter() - t0
    verdict(6, worst < 1e-3 and dt < 60, f"20 parameters, max rel error {worst:.2e}, {dt:.1f}s")


def test_07_edt_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        m = rng.random((64, 64)) < rng.uniform(0.001, 0.3)
        if not m.any():
            m[int(rng.integers(64)), int(rng.integers(64))] = True
        worst = max(worst, float(np.abs(euclidean_distance_transform(m) -
                                        brute_force_edt_vectorized(m)).max()))
    all_true = not euclidean_distance_transform(np.ones((64, 64), bool)).any()
    dt = time.perf_counter() - t0
    verdict(7, worst <= 1e-9 and all_true and dt < 60,
            f"100 masks, max abs error {worst:.1e}, all-true -> zeros: {all_true}, {dt:.1f}s")


def test_08_regression_oracle(verdict):
    x = np.linspace(0, 1, 37)
    exact = linear_regression(x, 1.07 * x + 0.02)
    ok = (exact.r_squared == pytest.approx(1.0, abs=1e-12)
          and exact.slope == pytest.approx(1.07, abs=1e-12))
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 60))
        xs = rng.uniform(0, 1, n)
        ys = rng.uniform(-1, 1) * xs + rng.normal(0, 0.2, n)
        r = linear_regression(xs, ys)
        slope, intercept, r2 = normal_equations_fit(xs, ys)
        worst = max(worst, abs(r.slope - slope), abs(r.intercept - intercept),
                    abs(r.r_squared - r2))
    verdict(8, ok and worst <= 1e-9, f"noiseless R2={exact.r_squared:.12f}, max error {worst:.1e}")


@pytest.fixture(scope="module")
def phantom_runs(tmp_path_factory):
    cfg = ExperimentConfig()
    dirs = [tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")]
    first = run_phantom_experiment(cfg, dirs[0])
    second = run_phantom_experiment(cfg, dirs[1])
    first["dir"], second["dir"] = dirs
    return cfg, first, second


def test_09_phantom_end_to_end(phantom_runs, verdict):
    cfg, result, _ = phantom_runs
    arms = result["arms"]
    m = {k: a.mse for k, a in arms.items()}
    both = arms["BOTH"].report
    reg = both.regression
    real_med = both.distance_real.median_um
    pred_med = both.distance_pred.median_um
    n_points = reg.n - 1
    checks = {
        "ordering": m["BOTH"] <= m["VESSEL"] < m["NUCLEI"],
        "rois>=30": n_points >= 30,
        "r2>=0.8": reg.r_squared >= 0.8,
        "slope in [0.7,1.3]": 0.7 <= reg.slope <= 1.3,
        "median within 20%": abs(pred_med - real_med) <= 0.2 * real_med,
        "runtime<15min": result["summary"]["elapsed_s"] < 900,
    }
    detail = (f"MSE N/V/B={m['NUCLEI']:.1f}/{m['VESSEL']:.1f}/{m['BOTH']:.1f} "
              f"R2={reg.r_squared:.3f} slope={reg.slope:.3f} "
              f"median real/pred={real_med:.2f}/{pred_med:.2f}um "
              f"t={result['summary']['elapsed_s']:.0f}s "
              f"failed={[k for k, v in checks.items() if not v]}")
    verdict(9, all(checks.values()), detail)


def test_10_determinism(phantom_runs, verdict):
    _, a, b = phantom_runs
    same = True
    for k in a["arms"]:
        sub = k.lower()
        last = sorted((a["dir"] / sub).glob("epoch_*.ckpt"))[-1].name
        for name in (last, "report.json"):
            same &= (a["dir"] / sub / name).read_bytes() == (b["dir"] / sub / name).read_bytes()
        same &= a["arms"][k].weights_sha256 == b["arms"][k].weights_sha256
    verdict(10, same, f"{len(a['arms'])} arms, checkpoints and reports byte-identical: {same}")
