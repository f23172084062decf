import numpy as np
import pytest
import torch

from brainaudio.diffusion import (
    Denoiser,
    ReconPipeline,
    ldm_loss,
    make_schedule,
    q_sample,
    sample,
    sampling_timesteps,
    train_ldm,
)
from brainaudio.errors import ConfigurationError, PipelineIntegrityError, ShapeError
from brainaudio.nn import finite_difference_check


def test_schedule_single_step():
    s = make_schedule(1, 1e-3, 1e-3)
    assert np.array_equal(s.alpha_cum, [1.0 - 1e-3])


def test_schedule_rejects_zero_beta():
    with pytest.raises(ConfigurationError):
        make_schedule(10, 0.0, 0.02)


def test_schedule_product_oracle():
    s = make_schedule(100, 1e-4, 0.02)
    prod = 1.0
    for i in range(100):
        prod *= 1.0 - (1e-4 + i * (0.02 - 1e-4) / 99)
    assert abs(s.alpha_cum[99] - prod) < 1e-12
    assert np.all(np.diff(s.alpha_cum) < 0)
    assert np.max(np.abs(s.alpha_cum[1:] - s.alpha_cum[:-1] * (1 - s.beta[1:]))) < 1e-12


def test_q_sample_zero_noise_and_small_t(rng):
    s = make_schedule(100, 1e-4, 0.02)
    z0 = rng.standard_normal((3, 4))
    assert np.array_equal(q_sample(z0, 7, np.zeros_like(z0), s), np.sqrt(s.alpha_cum[6]) * z0)
    eps = rng.standard_normal((3, 4))
    zt = q_sample(z0, 1, eps, s)
    assert np.linalg.norm(zt - z0) <= np.sqrt(1e-4) * np.linalg.norm(eps) + 1e-4 * np.linalg.norm(z0)


def test_q_sample_errors(rng):
    s = make_schedule(10, 1e-3, 0.02)
    z0 = rng.standard_normal(4)
    for t in (0, 11):
        with pytest.raises(IndexError):
            q_sample(z0, t, z0, s)
    with pytest.raises(ShapeError):
        q_sample(z0, 3, np.zeros(5), s)


def test_q_sample_torch_matches_numpy(rng):
    s = make_schedule(100, 1e-3, 0.2)
    z0, eps = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    t = np.array([1, 30, 60, 100])
    out = q_sample(torch.as_tensor(z0), torch.as_tensor(t), torch.as_tensor(eps), s).numpy()
    ref = np.stack([q_sample(z0[i], int(t[i]), eps[i], s) for i in range(4)])
    assert np.allclose(out, ref, atol=1e-12)


def tiny_denoiser(sched, dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    return Denoiser(12, 16, (8, 8), sched.alpha_cum, width=8).to(dtype)


def test_ldm_loss_identities(rng):
    s = make_schedule(20, 1e-3, 0.2)
    den = tiny_denoiser(s)
    z0 = torch.randn(3, 16, 8, 8)
    c = torch.randn(3, 16, 12)
    t = torch.tensor([1, 7, 20])
    eps = torch.randn(3, 16, 8, 8)
    single = torch.nn.functional.mse_loss(den(q_sample(z0, t, eps, s), t, c), eps)
    assert float(ldm_loss(z0, c, c, t, eps, den, s)) == float(2 * single)
    oracle = lambda z, tt, cc: eps
    assert float(ldm_loss(z0, c, torch.randn_like(c), t, eps, oracle, s)) == 0.0
    with pytest.raises(ShapeError):
        ldm_loss(z0, c, c[:, :8], t, eps, den, s)


def test_ldm_loss_recomputation(rng):
    s = make_schedule(20, 1e-3, 0.2)
    den = tiny_denoiser(s, torch.float64)
    z0 = torch.randn(2, 16, 8, 8, dtype=torch.float64)
    c, cg = torch.randn(2, 16, 12, dtype=torch.float64), torch.randn(2, 16, 12, dtype=torch.float64)
    t, eps = torch.tensor([4, 15]), torch.randn(2, 16, 8, 8, dtype=torch.float64)
    a = torch.tensor([s.alpha_cum[3], s.alpha_cum[14]], dtype=torch.float64).view(2, 1, 1, 1)
    zt = a.sqrt() * z0 + (1 - a).sqrt() * eps
    ref = ((den(zt, t, c) - eps) ** 2).mean() + ((den(zt, t, cg) - eps) ** 2).mean()
    assert abs(float(ldm_loss(z0, c, cg, t, eps, den, s)) - float(ref)) < 1e-12


def test_denoiser_gradient():
    s = make_schedule(20, 1e-3, 0.2)
    den = tiny_denoiser(s, torch.float64)
    with torch.no_grad():  # the output conv starts at zero; perturb so every branch carries gradient
        den.conv_out.weight.normal_(0, 0.1)
    z = torch.randn(2, 16, 8, 8, dtype=torch.float64)
    c = torch.randn(2, 16, 12, dtype=torch.float64)
    t = torch.tensor([3, 17])
    params = [p for p in den.parameters()]
    assert finite_difference_check(lambda: (den(z, t, c) ** 2).sum(), params, n_probe=3) < 1e-4


def test_sampler_oracle_inversion(rng):
    s = make_schedule(100, 1e-3, 0.2)
    z0 = torch.as_tensor(rng.standard_normal((2, 16, 4, 4)))
    eps = torch.as_tensor(rng.standard_normal((2, 16, 4, 4)))
    zt = q_sample(z0, 40, eps, s)
    oracle = lambda z, t, c: eps
    out = sample(oracle, torch.zeros(2, 1, dtype=torch.float64), s, 1, "deterministic", z_init=zt, t_start=40)
    assert float((out - z0).abs().max()) < 1e-5


def test_sampler_determinism_and_errors():
    s = make_schedule(20, 1e-3, 0.2)
    den = tiny_denoiser(s)
    with torch.no_grad():
        den.conv_out.weight.normal_(0, 0.1)
    c = torch.randn(1, 16, 12)
    for mode in ("deterministic", "ancestral"):
        a = sample(den, c, s, 5, mode, seed=3, shape=(1, 16, 8, 8))
        b = sample(den, c, s, 5, mode, seed=3, shape=(1, 16, 8, 8))
        assert torch.equal(a, b)
    with pytest.raises(ConfigurationError):
        sample(den, c, s, 21, shape=(1, 16, 8, 8))
    with pytest.raises(ConfigurationError):
        sample(den, c, s, 5, "euler", shape=(1, 16, 8, 8))


def test_sampling_timesteps():
    ts = sampling_timesteps(100, 50)
    assert ts[0] == 100 and ts[-1] == 1 and len(ts) == 50 and np.all(np.diff(ts) < 0)
    assert list(sampling_timesteps(40, 1)) == [40]


def test_train_ldm_zero_steps_and_vae_frozen(small_ds, small_cfg, bundle):
    from brainaudio.acoustic import build_acoustic
    from brainaudio.experiments import fit_semantic

    ridge = fit_semantic(small_ds, small_cfg)
    aco = build_acoustic(small_ds, ridge, small_cfg.acoustic, small_cfg.ridge.n_fmri_token, 0)
    s = make_schedule(small_cfg.ldm.T, small_cfg.ldm.beta_start, small_cfg.ldm.beta_end)
    run0 = train_ldm(small_ds, aco, ridge, bundle, s, small_cfg.ldm, 0.25, 0)
    torch.manual_seed(0)
    from brainaudio.diffusion import build_denoiser, mel_latents

    init = build_denoiser(mel_latents(bundle, small_ds.get("mel64", "train")), 96, 104, s, small_cfg.ldm, 0)
    for (k, a), (_, b) in zip(run0.denoiser.state_dict().items(), init.state_dict().items()):
        assert torch.equal(a, b), k
    before = bundle.hash
    from dataclasses import replace

    run = train_ldm(small_ds, aco, ridge, bundle, s, replace(small_cfg.ldm, steps=3), 0.25, 0)
    assert bundle.hash == before
    assert len(run.losses) == 3


def test_pipeline_refuses_mixed_lineage(bundle):
    with pytest.raises(PipelineIntegrityError):
        ReconPipeline(bundle, None, None, None, None, None, 200, {"ridge": "aaa", "ldm": "bbb"})


def test_q_step_matches_closed_form_without_noise(rng):
    from brainaudio.diffusion import q_step

    s = make_schedule(30, 1e-3, 0.2)
    z0 = rng.standard_normal(5)
    z = z0.copy()
    for t in range(1, 31):
        z = q_step(z, t, np.zeros_like(z), s)
        assert np.allclose(z, q_sample(z0, t, np.zeros_like(z0), s), rtol=0, atol=1e-12)
    with pytest.raises(IndexError):
        q_step(z0, 31, z0, s)
