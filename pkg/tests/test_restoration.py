import itertools

import numpy as np
import pytest
import torch

from cqcd.imaging import DisplacementField, psnr, warp
from cqcd.quasiconformal import bc_loss, beltrami, invert_field
from cqcd.restoration import (
    BlurRemover,
    GridEstimator,
    NumericalFailure,
    RestorationConfig,
    RestorationState,
    gradient_check,
    gradient_samples,
    loss_dist,
    loss_rec,
    median_minimizer,
    optimize,
    squash,
    total_losses,
)
from cqcd.restoration import ops
from cqcd.restoration.models import upsample_matrix
from cqcd.simulator import TurbulenceConfig, default_scene, generate, random_smooth_field
from cqcd.tightframe import feature_stack


@pytest.fixture(scope="module")
def small_bundle():
    return generate(default_scene(16), TurbulenceConfig.from_preset("mild", T=3, seed=1))


def randomized_state(frames, seed=3, **kw):
    kw.setdefault("grid_spacing", 4)
    state = RestorationState(RestorationConfig(**kw), frames)
    with torch.no_grad():
        for p in state.estimator.parameters():
            p.normal_(0, 0.7, generator=torch.Generator().manual_seed(seed))
    return state


# --- torch ops agree with the numpy reference -------------------------------

def test_torch_warp_matches_numpy():
    rng = np.random.default_rng(0)
    img = rng.random((12, 15, 3))
    fld = DisplacementField(3 * rng.standard_normal((12, 15)), 3 * rng.standard_normal((12, 15)))
    out = ops.warp(torch.tensor(img.transpose(2, 0, 1)[None]), torch.tensor(fld.dx[None]), torch.tensor(fld.dy[None]))
    np.testing.assert_allclose(out[0].numpy().transpose(1, 2, 0), warp(img, fld), atol=1e-14)


def test_torch_tight_frame_matches_numpy():
    img = np.random.default_rng(1).random((10, 13, 3))
    for level in (1, 2, 3):
        tf = ops.TightFrame(level)
        out = tf(torch.tensor(img.transpose(2, 0, 1)[None]))[0].numpy()
        ref = np.stack(feature_stack(img, level))
        np.testing.assert_allclose(out, ref, atol=1e-14)


def test_torch_mu_matches_numpy():
    cfg = TurbulenceConfig.from_preset("severe", seed=4)
    fld = random_smooth_field(cfg, 0, (20, 24))
    mu2 = ops.mu_squared(torch.tensor(fld.dx), torch.tensor(fld.dy)).numpy()
    np.testing.assert_allclose(mu2, beltrami(fld).magnitude(clamp=10.0) ** 2, rtol=1e-12, atol=1e-14)


# --- estimator ------------------------------------------------------------------

def test_fresh_estimator_is_identity():
    est = GridEstimator(4, 20, 20, spacing=8)
    dx, dy = est()
    assert torch.count_nonzero(dx) == 0 and torch.count_nonzero(dy) == 0


def test_single_control_point():
    est = GridEstimator(2, 17, 17, spacing=8, displacement_scale=5.0)
    v = 3.0
    with torch.no_grad():
        est.raw[1, 0, 1, 1] = v
    dx, dy = (a.detach() for a in est())
    s = 5.0 * np.tanh(v / 5.0)
    hat = np.concatenate([np.arange(9) / 8, np.arange(7, -1, -1) / 8])  # tent centred on node 1
    np.testing.assert_allclose(dx[1].numpy(), s * np.outer(hat, hat), atol=1e-14)
    assert torch.count_nonzero(dy) == 0 and torch.count_nonzero(dx[0]) == 0
    assert dx[1, 8, 8].item() == pytest.approx(s)


def test_displacement_bound():
    est = GridEstimator(3, 24, 24, spacing=4, displacement_scale=5.0, center=True)
    with torch.no_grad():
        est.raw.normal_(0, 100.0, generator=torch.Generator().manual_seed(0))
    dx, dy = est()
    assert dx.abs().max() <= 5.0 and dy.abs().max() <= 5.0


def test_centered_fields_have_zero_mean_raw():
    est = GridEstimator(3, 16, 16, spacing=4, center=True)
    with torch.no_grad():
        est.raw.fill_(0.7)
    dx, dy = est()
    assert dx.abs().max() < 1e-15 and dy.abs().max() < 1e-15


def test_upsample_rows_are_partitions_of_unity():
    m = upsample_matrix(37, 8)
    np.testing.assert_allclose(m.sum(dim=1).numpy(), 1.0, atol=1e-15)
    assert m.shape == (37, 6)


def test_squash_is_odd_and_bounded():
    x = torch.linspace(-50, 50, 101, dtype=torch.float64)
    y = squash(x, 2.0)
    # tanh saturates to exactly 1 in float64 for large inputs
    assert y.abs().max() <= 2.0
    assert squash(torch.tensor(3.0, dtype=torch.float64), 2.0) < 2.0
    assert squash(torch.tensor(1e-9, dtype=torch.float64), 2.0).item() == pytest.approx(1e-9, rel=1e-12)
    np.testing.assert_allclose(y.numpy(), -squash(-x, 2.0).numpy())


# --- blur remover -----------------------------------------------------------------

def test_linear_remover_computes_lowpass_mean():
    t, planes = 3, 9
    rem = BlurRemover(t * planes, 1, hidden=4, linear=True)
    with torch.no_grad():
        for conv in rem.convs:
            conv.weight.zero_()
            conv.bias.zero_()
        for k in range(t):
            rem.convs[0].weight[0, k * planes] = 1.0 / t
        rem.convs[1].weight[0, 0] = 1.0
        rem.convs[2].weight[0, 0] = 1.0
    frames = np.random.default_rng(2).random((t, 16, 16, 1))
    feats = torch.tensor(np.stack(feature_stack(frames, 1)))[None]
    out = rem(feats)[0, 0].detach().numpy()
    lowpass = np.mean([feature_stack(f, 1)[0] for f in frames], axis=0)
    np.testing.assert_allclose(out, lowpass, atol=1e-14)


def test_remover_output_in_unit_interval():
    rem = BlurRemover(18, 3, hidden=8, generator=torch.Generator().manual_seed(0))
    x = 50 * torch.randn(1, 18, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    out = rem(x)
    assert out.shape == (1, 3, 8, 8)
    assert (out > 0).all() and (out < 1).all()


def test_remover_is_pixelwise_and_deterministic():
    rem = BlurRemover(6, 1, hidden=8, generator=torch.Generator().manual_seed(0)).eval()
    x = torch.randn(1, 6, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    a, b = rem(x), rem(x)
    assert torch.equal(a, b)
    y = x.clone()
    y[:, :, 0, 0] += 1.0
    diff = (rem(y) - a).abs()[0, 0]
    assert diff[0, 0] > 0
    diff[0, 0] = 0
    assert diff.max() == 0


def test_remover_plane_mismatch():
    rem = BlurRemover(6, 1, hidden=4)
    with pytest.raises(ValueError):
        rem(torch.zeros(1, 5, 8, 8, dtype=torch.float64))


# --- losses -----------------------------------------------------------------------

def test_loss_rec_examples():
    f = np.random.default_rng(0).random((8, 8, 1))
    assert loss_rec(f, [f, f]) == 0.0
    assert loss_rec(np.full((8, 8), 0.5), [np.full((8, 8), 0.4), np.full((8, 8), 0.6)]) == pytest.approx(0.1)


@pytest.mark.parametrize("t", [3, 5])
def test_median_minimizes_loss_rec(t):
    rng = np.random.default_rng(t)
    for _ in range(5):
        frames = rng.random((t, 4, 4, 1))
        best = median_minimizer(frames)
        # the objective is piecewise linear per pixel, so a minimum sits at a data value
        brute = np.empty((4, 4, 1))
        for i, j in itertools.product(range(4), range(4)):
            cands = frames[:, i, j, 0]
            costs = [np.mean(np.abs(c - cands)) for c in cands]
            brute[i, j, 0] = cands[int(np.argmin(costs))]
        assert loss_rec(best, frames) == pytest.approx(loss_rec(brute, frames), abs=1e-12)
        grid = np.linspace(0, 1, 201)
        for i, j in itertools.product(range(4), range(4)):
            scan = np.abs(grid[:, None] - frames[None, :, i, j, 0]).mean(axis=1).min()
            assert np.mean(np.abs(best[i, j, 0] - frames[:, i, j, 0])) <= scan + 1e-12


def test_loss_dist_examples():
    f = np.random.default_rng(0).random((3, 8, 8, 1))
    assert loss_dist(f, f) == 0.0
    assert loss_dist(f * 0 + 0.3, f * 0 + 0.5) == pytest.approx(0.2)
    mean = f.mean(axis=0)
    direct = np.mean([np.abs(x - mean).mean() for x in f])
    assert loss_dist(f, [mean] * 3) == pytest.approx(direct, abs=1e-15)


def test_total_losses_examples():
    de, br, comp = total_losses(0.0, 0.0, 0.0, 0.1)
    assert de == br == 0.0
    de, br, _ = total_losses(0.2, 0.3, 0.05, 0.0)
    assert de == br
    de1, _, _ = total_losses(0.2, 0.3, 0.05, 0.1)
    de2, _, _ = total_losses(0.2, 0.3, 0.05, 1.0)
    assert de2 - de1 == pytest.approx(0.9 * 0.05)
    with pytest.raises(ValueError):
        total_losses(0, 0, 0, -1.0)


def test_pipeline_losses_match_numpy(small_bundle):
    state = randomized_state(small_bundle.frames)
    state.remover.eval()
    with torch.no_grad():
        fw = state.forward()
    restored = fw.restored[0].numpy().transpose(1, 2, 0)
    warped = fw.warped.numpy().transpose(0, 2, 3, 1)
    redis = fw.redistorted.numpy().transpose(0, 2, 3, 1)
    fields = [DisplacementField(a, b) for a, b in zip(fw.dx.numpy(), fw.dy.numpy())]
    inverses = [invert_field(f).field for f in fields]
    np.testing.assert_allclose(warped, np.stack([warp(fr, f) for fr, f in zip(small_bundle.frames, fields)]), atol=1e-14)
    np.testing.assert_allclose(redis, np.stack([warp(restored, g) for g in inverses]), atol=1e-12)
    assert fw.rec.item() == pytest.approx(loss_rec(restored, warped), abs=1e-14)
    assert fw.dist.item() == pytest.approx(loss_dist(small_bundle.frames, redis), abs=1e-14)
    assert fw.bc.item() == pytest.approx(bc_loss(fields, inverses), abs=1e-13)


def test_identity_single_frame_has_zero_objectives():
    frame = default_scene(16)
    state = RestorationState(RestorationConfig(linear_remover=True, use_tf=False), [frame])
    with torch.no_grad():
        w = state.remover.convs
        for conv in w:
            conv.weight.zero_()
            conv.bias.zero_()
        w[0].weight[0, 0] = w[1].weight[0, 0] = w[2].weight[0, 0] = 1.0
        fw = state.forward()
    de, br = state.objectives(fw)
    assert de.item() == 0.0 and br.item() == 0.0


def test_identity_fields_dist_equals_frame_residual(small_bundle):
    state = RestorationState(RestorationConfig(grid_spacing=4), small_bundle.frames)
    state.remover.eval()
    with torch.no_grad():
        fw = state.forward()
    restored = fw.restored[0].numpy().transpose(1, 2, 0)
    direct = np.mean([np.abs(f - restored).mean() for f in small_bundle.frames])
    assert fw.dist.item() == pytest.approx(direct, abs=1e-15)


def test_objectives_ordering(small_bundle):
    state = randomized_state(small_bundle.frames, lam=0.5)
    with torch.no_grad():
        de, br = state.objectives(state.forward())
    assert br.item() >= 0 and de.item() >= br.item()


# --- gradients --------------------------------------------------------------------

def test_gradient_check_linear_path(small_bundle):
    # the loss is piecewise linear in any single remover weight, so central
    # differences carry no truncation error; what remains is round-off, about
    # eps * L * sqrt(N) per loss evaluation over N summed residuals
    state = randomized_state(small_bundle.frames, linear_remover=True)
    step = 1e-5
    samples = gradient_samples(state, n_params=64, step=step, groups=("remover",))
    n_terms = 2 * small_bundle.frames[0].size * len(small_bundle.frames)
    for s in samples:
        roundoff = np.finfo(float).eps * abs(s.loss) * np.sqrt(n_terms) / step
        assert s.relative_error() <= 1e-6 or abs(s.analytic - s.numeric) <= roundoff


@pytest.mark.parametrize("lam", [0.0, 0.1])
def test_gradient_check_full(small_bundle, lam):
    state = randomized_state(small_bundle.frames, lam=lam)
    for _ in range(3):
        state.step()
    assert gradient_check(state, n_params=32, seed=int(lam * 10)) <= 1e-4


# --- optimization loop ------------------------------------------------------------

def test_identical_frames_fixed_point():
    clean = default_scene(32)
    frames = [clean] * 3
    cfg = RestorationConfig(seed=1)
    restored, fields, state = optimize(cfg, frames)
    assert np.mean([f.magnitude().mean() for f in fields]) < 0.1
    assert psnr(restored, clean) > 40


def test_optimize_is_deterministic(small_bundle):
    cfg = RestorationConfig(epochs=120, grid_spacing=4, hidden=32, seed=5)
    a = optimize(cfg, small_bundle.frames)
    b = optimize(cfg, small_bundle.frames)
    assert [r.row() for r in a[2].history] == [r.row() for r in b[2].history]
    assert np.array_equal(a[0], b[0])


def test_alternation_schedule(small_bundle):
    state = RestorationState(RestorationConfig(grid_spacing=4, hidden=16), small_bundle.frames)
    phases = [state.phase(e) for e in range(200)]
    assert phases[:50] == ["remover"] * 50 and phases[50:100] == ["estimator"] * 50
    assert phases[100] == "remover"
    raw0 = state.estimator.raw.detach().clone()
    for _ in range(50):
        state.step()
    assert torch.equal(state.estimator.raw, raw0)
    w0 = state.remover.convs[0].weight.detach().clone()
    state.step()
    assert torch.equal(state.remover.convs[0].weight, w0)
    assert not torch.equal(state.estimator.raw, raw0)


def test_learning_rate_decay(small_bundle):
    state = RestorationState(RestorationConfig(grid_spacing=4, hidden=8, lr_decay_every=3), small_bundle.frames)
    for _ in range(7):
        state.step()
    assert state.opt_estimator.param_groups[0]["lr"] == pytest.approx(1e-2 * 0.25)
    assert state.opt_remover.param_groups[0]["lr"] == pytest.approx(1e-3 * 0.25)


def test_early_stop(small_bundle):
    cfg = RestorationConfig(epochs=1000, grid_spacing=4, hidden=8, early_stop_window=5, early_stop_tol=1.0)
    _, _, state = optimize(cfg, small_bundle.frames)
    assert len(state.history) == 6


def test_nonfinite_loss_aborts(small_bundle):
    state = RestorationState(RestorationConfig(grid_spacing=4, hidden=8), small_bundle.frames)
    with torch.no_grad():
        state.remover.convs[2].bias.fill_(float("nan"))
    with pytest.raises(NumericalFailure) as err:
        optimize(RestorationConfig(), small_bundle.frames, state=state)
    assert err.value.dump["remover_finite"] is False


def test_optimize_requires_two_frames():
    with pytest.raises(ValueError):
        optimize(RestorationConfig(), [default_scene(16)])


def test_config_rejects_unknown_and_negative():
    with pytest.raises(ValueError):
        RestorationConfig.from_dict({"lam": 0.1, "bogus": 1})
    with pytest.raises(ValueError):
        RestorationConfig(lam=-0.1)
    with pytest.raises(ValueError):
        RestorationConfig(backend="unet")


def test_checkpoint_resume_matches_uninterrupted(tmp_path, small_bundle):
    cfg = RestorationConfig(epochs=60, grid_spacing=4, hidden=16, seed=2)
    _, _, full = optimize(cfg, small_bundle.frames)
    part_cfg = RestorationConfig(epochs=30, grid_spacing=4, hidden=16, seed=2)
    _, _, part = optimize(part_cfg, small_bundle.frames)
    part.save(tmp_path / "ckpt.pt")
    resumed = RestorationState.load(tmp_path / "ckpt.pt", small_bundle.frames)
    resumed.config.epochs = 60
    _, _, resumed = optimize(resumed.config, small_bundle.frames, state=resumed)
    assert [r.row() for r in resumed.history] == [r.row() for r in full.history]


def test_losses_csv(tmp_path, small_bundle):
    _, _, state = optimize(RestorationConfig(epochs=4, grid_spacing=4, hidden=8), small_bundle.frames)
    state.write_losses_csv(tmp_path / "losses.csv")
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_rec,l_dist,l_bc,l_de,l_br"
    assert len(lines) == 5
    row = lines[2].split(",")
    assert float(row[4]) == pytest.approx(float(row[5]) + 0.1 * float(row[3]))


def test_conv_backend_runs(small_bundle):
    cfg = RestorationConfig(backend="conv", epochs=60, hidden=16, phase_epochs=10)
    restored, fields, state = optimize(cfg, small_bundle.frames)
    assert len(fields) == 3
    assert all(np.abs(f.dx).max() <= 10 for f in fields)
    assert np.isfinite(state.history[-1].l_de)
    fresh = RestorationState(cfg, small_bundle.frames)
    dx, dy = fresh.estimate()
    assert torch.count_nonzero(dx) == 0
