import math

import numpy as np
import pytest

from dtp import diffcore as dc
from dtp.diffcore import AdamW, Tape, Tensor, backward, no_grad, use_tape
from dtp.dataset import render, synth_scene
from dtp.disentangler import DisentangleNet
from dtp.errors import ConfigError, ContractError, DimensionError
from dtp.iaparser import FusionOutput, IAParserNet
from dtp.sod import (
    DisturbSchedule,
    GuidanceNoiseConfig,
    SodWeights,
    cross_entangle_redisentangle,
    disentangle_loss,
    disturb,
    generate_guidance_noise,
    retinex_loss,
    sample_beta,
    semantic_disentangle_loss,
    smooth_loss,
    sod_train_step,
)


# ------------------------------------------------------------------- schedule

def test_beta_at_start_is_exactly_one():
    rng = np.random.default_rng(0)
    sched = DisturbSchedule(t=0, t_max=100)
    assert all(sample_beta(sched, rng) == 1.0 for _ in range(10))


def test_beta_monte_carlo_means():
    rng = np.random.default_rng(1)
    n = 100_000
    end = np.array([sample_beta(DisturbSchedule(t=100, t_max=100), rng) for _ in range(n)])
    assert end.min() >= 0.0 and end.max() <= 1.0
    assert abs(end.mean() - 0.5) < 0.01
    mid = np.array([sample_beta(DisturbSchedule(t=50, t_max=100), rng) for _ in range(n)])
    assert abs(mid.mean() - 0.75) < 0.01
    assert mid.min() >= 0.5


def test_schedule_validation():
    with pytest.raises(ConfigError):
        DisturbSchedule(t=0, t_max=0)
    with pytest.raises(ConfigError):
        DisturbSchedule(t=5, t_max=4)


# -------------------------------------------------------------- guidance noise

def test_constant_noise_component():
    cfg = GuidanceNoiseConfig(mixture=(1.0, 0.0, 0.0))
    field = generate_guidance_noise(cfg, (4, 1, 16, 32), np.random.default_rng(2))
    for b in range(4):
        assert np.allclose(field[b], field[b, 0, 0, 0])
    assert field.min() >= cfg.floor and field.max() <= 1.0


def test_ramp_noise_has_constant_gradient_along_axis():
    cfg = GuidanceNoiseConfig(mixture=(0.0, 0.0, 1.0))
    field = generate_guidance_noise(cfg, (8, 1, 16, 32), np.random.default_rng(3))
    for b in range(8):
        f = field[b, 0]
        gh = np.diff(f, axis=0)
        gw = np.diff(f, axis=1)
        # one axis carries a constant slope, the other is flat
        if np.allclose(gh, 0, atol=1e-7):
            assert np.allclose(gw, gw[0, 0], atol=1e-6)
        else:
            assert np.allclose(gw, 0, atol=1e-7)
            assert np.allclose(gh, gh[0, 0], atol=1e-6)


def test_noise_smoothness_audit_1000_fields():
    cfg = GuidanceNoiseConfig()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        f = generate_guidance_noise(cfg, (1, 1, 64, 128), rng)[0, 0].astype(np.float64)
        gw = np.abs(np.diff(f, axis=1)).mean()
        gh = np.abs(np.diff(f, axis=0)).mean()
        worst = max(worst, (gw + gh) / 2)
    assert worst < cfg.max_mean_gradient


def test_noise_deterministic_under_seed():
    cfg = GuidanceNoiseConfig()
    a = generate_guidance_noise(cfg, (2, 1, 8, 8), np.random.default_rng(9))
    b = generate_guidance_noise(cfg, (2, 1, 8, 8), np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_noise_shape_contract():
    with pytest.raises(DimensionError):
        generate_guidance_noise(GuidanceNoiseConfig(), (2, 3, 8, 8), np.random.default_rng(0))


# ------------------------------------------------------------------- disturb

def test_disturb_identity_and_replacement():
    i = Tensor(np.full((1, 1, 4, 4), 0.2, np.float32))
    n = np.full((1, 1, 4, 4), 0.8, np.float32)
    assert np.array_equal(disturb(i, n, 0.0).data, i.data)
    assert np.allclose(disturb(i, n, 1.0).data, 0.8, atol=1e-7)
    assert np.allclose(disturb(i, n, 0.5).data, 0.5, atol=1e-6)


def test_disturb_rejects_bad_beta():
    i = Tensor(np.full((1, 1, 2, 2), 0.5, np.float32))
    n = np.full((1, 1, 2, 2), 0.5, np.float32)
    with pytest.raises(ContractError):
        disturb(i, n, 1.5)
    with pytest.raises(ContractError):
        disturb(i, n, -0.1)


# --------------------------------------------------- cross entangle + losses

class _IdentityDisentangler:
    """Stub that inverts the multiplicative composition exactly.

    It treats the first channel ratio as illumination, assuming the true
    reflectance is known: M(R*I) == (R, I). Used as the perfect-fixed-point
    oracle for the cross-entanglement contract.
    """

    def __init__(self, true_r: np.ndarray):
        self.true_r = true_r

    def forward(self, x: Tensor):
        from dtp.disentangler import DisentangleOutput
        r = np.concatenate([self.true_r] * (x.shape[0] // self.true_r.shape[0]), axis=0)
        i = x.data[:, :1] / r[:, :1]
        return DisentangleOutput(reflectance=Tensor(r), illumination=Tensor(i))


def test_cross_entangle_shapes_and_ranges_with_real_net():
    net = DisentangleNet("small", seed=0)
    rng = np.random.default_rng(5)
    r_j = Tensor(rng.uniform(0.2, 0.9, (2, 3, 16, 32)).astype(np.float32))
    r_k = Tensor(rng.uniform(0.2, 0.9, (2, 3, 16, 32)).astype(np.float32))
    i_j = Tensor(rng.uniform(0.1, 1.0, (2, 1, 16, 32)).astype(np.float32))
    i_k = Tensor(rng.uniform(0.1, 1.0, (2, 1, 16, 32)).astype(np.float32))
    with no_grad():
        r_j_s, i_k_s, r_k_s, i_j_s, synth = cross_entangle_redisentangle(net, r_j, i_k, r_k, i_j)
    assert r_j_s.shape == r_j.shape and r_k_s.shape == r_k.shape
    assert i_j_s.shape == i_j.shape and i_k_s.shape == i_k.shape
    assert synth.shape == (4, 3, 16, 32)
    for t in (r_j_s, r_k_s):
        assert t.data.min() >= 0.0 and t.data.max() <= 1.0
    for t in (i_j_s, i_k_s):
        assert t.data.min() >= 1e-3 and t.data.max() <= 1.0


def test_cross_entangle_perfect_net_is_fixed_point():
    rng = np.random.default_rng(6)
    true_r = rng.uniform(0.3, 0.9, (1, 3, 8, 8)).astype(np.float32)
    true_r = np.repeat(true_r[:, :1], 3, axis=1)  # gray so channel-0 ratio is exact
    net = _IdentityDisentangler(true_r)
    r = Tensor(true_r)
    i_a = Tensor(rng.uniform(0.2, 0.9, (1, 1, 8, 8)).astype(np.float32))
    i_b = Tensor(rng.uniform(0.2, 0.9, (1, 1, 8, 8)).astype(np.float32))
    with no_grad():
        r_j_s, i_k_s, r_k_s, i_j_s, _ = cross_entangle_redisentangle(net, r, i_b, r, i_a)
        loss = disentangle_loss(r_j_s, r, r_k_s, r, i_j_s, i_a, i_k_s, i_b)
    assert loss.item() < 1e-5


def test_weight_sharing_is_by_identity():
    net = DisentangleNet("small", seed=1)
    params_a = net.params()
    params_b = net.params()
    for a, b in zip(params_a, params_b):
        assert a is b  # the same module serves both syntheses


def test_disentangle_loss_cases():
    rng = np.random.default_rng(7)
    shape = (1, 3, 4, 4)
    r = Tensor(rng.uniform(0, 1, shape).astype(np.float32))
    i = Tensor(rng.uniform(0, 1, (1, 1, 4, 4)).astype(np.float32))
    zero = disentangle_loss(r, r, r, r, i, i, i, i)
    assert zero.item() == 0.0
    shifted = Tensor(r.data + 0.1)
    val = disentangle_loss(shifted, r, r, r, i, i, i, i)
    assert abs(val.item() - 0.1) < 1e-6


def test_disentangle_loss_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    mk3 = lambda: Tensor(rng.uniform(0, 1, (1, 3, 3, 3)).astype(np.float32))
    mk1 = lambda: Tensor(rng.uniform(0, 1, (1, 1, 3, 3)).astype(np.float32))
    rjs, rj, rks, rk = mk3(), mk3(), mk3(), mk3()
    ijs, ijp, iks, ikp = mk1(), mk1(), mk1(), mk1()
    got = disentangle_loss(rjs, rj, rks, rk, ijs, ijp, iks, ikp).item()
    want = (np.abs(rjs.data - rj.data).mean() + np.abs(rks.data - rk.data).mean()
            + np.abs(ijs.data - ijp.data).mean() + np.abs(iks.data - ikp.data).mean())
    assert abs(got - want) < 1e-6


def test_retinex_loss_cases():
    rng = np.random.default_rng(9)
    r = Tensor(rng.uniform(0.1, 1, (1, 3, 4, 4)).astype(np.float32))
    i = Tensor(rng.uniform(0.1, 1, (1, 1, 4, 4)).astype(np.float32))
    x = Tensor(r.data * i.data)
    assert retinex_loss(r, i, x).item() < 1e-12
    ones3 = Tensor(np.ones((1, 3, 4, 4), np.float32))
    ones1 = Tensor(np.ones((1, 1, 4, 4), np.float32))
    x09 = Tensor(np.full((1, 3, 4, 4), 0.9, np.float32))
    assert abs(retinex_loss(ones3, ones1, x09).item() - 0.01) < 1e-6


def test_retinex_loss_matches_scalar_oracle():
    rng = np.random.default_rng(10)
    r = Tensor(rng.uniform(0, 1, (2, 3, 3, 3)).astype(np.float32))
    i = Tensor(rng.uniform(0.1, 1, (2, 1, 3, 3)).astype(np.float32))
    x = Tensor(rng.uniform(0, 1, (2, 3, 3, 3)).astype(np.float32))
    got = retinex_loss(r, i, x).item()
    want = float(np.mean((i.data * r.data - x.data) ** 2))
    assert abs(got - want) < 1e-6


def test_smooth_loss_constant_illumination_is_zero():
    rng = np.random.default_rng(11)
    i = Tensor(np.full((1, 1, 8, 8), 0.3, np.float32))
    r = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    assert smooth_loss(i, r).item() == 0.0


def test_smooth_loss_unweighted_ramp():
    # constant reflectance -> exp(0)=1 weights; loss = mean of squared gradients
    w = 8
    ramp = np.tile(np.linspace(0, 1, w, dtype=np.float32), (1, 1, 8, 1))
    i = Tensor(ramp)
    r = Tensor(np.full((1, 3, 8, w), 0.5, np.float32))
    got = smooth_loss(i, r, 10.0).item()
    step = 1.0 / (w - 1)
    want = (w - 1) * 8 * step ** 2 / (8 * w)  # mean over all pixels, trailing col zero
    assert abs(got - want) < 1e-6


def test_smooth_loss_edge_aware_exemption():
    # an illumination edge aligned with a reflectance edge costs strictly less
    i = np.full((1, 1, 8, 8), 0.2, np.float32)
    i[:, :, :, 4:] = 0.8
    r_flat = np.full((1, 3, 8, 8), 0.5, np.float32)
    r_edge = r_flat.copy()
    r_edge[:, :, :, 4:] = 0.9
    aligned = smooth_loss(Tensor(i), Tensor(r_edge), 10.0).item()
    unaligned = smooth_loss(Tensor(i), Tensor(r_flat), 10.0).item()
    assert aligned < unaligned


# ------------------------------------------------------- semantic (SeDe) loss

class _StubParser:
    """Returns fixed logits regardless of input; k classes."""

    def __init__(self, k, mode="uniform"):
        self.k = k
        self.mode = mode

    def parse(self, net, r, i):
        b, _, h, w = r.shape
        if self.mode == "uniform":
            logits = np.zeros((b, self.k, h, w), np.float32)
        else:  # oracle: one-hot on the stored labels
            logits = np.full((b, self.k, h, w), -1000.0, np.float32)
            for bi in range(b):
                lab = self.labels[bi % len(self.labels)]
                for c in range(self.k):
                    logits[bi, c][lab == c] = 1000.0
        return FusionOutput(logits=Tensor(logits),
                            attention=Tensor(np.full((b, 1, h // 4 or 1, w // 4 or 1), 0.5, np.float32)),
                            aux_logits=Tensor(logits[:, :, ::4, ::4].copy()))


def test_sede_uniform_stub_gives_4_lnk_per_head():
    k = 4
    stub = _StubParser(k, "uniform")
    rng = np.random.default_rng(12)
    r = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32))
    i = Tensor(rng.uniform(0.1, 1, (2, 1, 8, 8)).astype(np.float32))
    y = rng.integers(0, k, (2, 8, 8))
    # lambda 0 isolates the fused head: 4 terms x ln k
    loss = semantic_disentangle_loss(None, r, i, y, r, i, y, r, r,
                                     lambda_ill=0.0, parse_fn=stub.parse)
    assert abs(loss.item() - 4 * math.log(k)) < 1e-5
    # lambda 1 doubles it through the auxiliary head
    loss2 = semantic_disentangle_loss(None, r, i, y, r, i, y, r, r,
                                      lambda_ill=1.0, parse_fn=stub.parse)
    assert abs(loss2.item() - 8 * math.log(k)) < 1e-5


def test_sede_oracle_stub_is_zero():
    k = 3
    rng = np.random.default_rng(13)
    y = rng.integers(0, k, (1, 8, 8))
    stub = _StubParser(k, "oracle")
    stub.labels = [y[0]]
    r = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    i = Tensor(rng.uniform(0.1, 1, (1, 1, 8, 8)).astype(np.float32))
    loss = semantic_disentangle_loss(None, r, i, y, r, i, y, r, r,
                                     lambda_ill=0.0, parse_fn=stub.parse)
    assert loss.item() < 1e-6


def test_sede_gradients_reach_disentangler():
    dis = DisentangleNet("small", seed=2)
    seg = IAParserNet(4, 8, seed=3)
    rng = np.random.default_rng(14)
    x = Tensor(rng.uniform(0, 1, (2, 3, 16, 32)).astype(np.float32))
    y = rng.integers(0, 4, (1, 16, 32))
    with use_tape(Tape()):
        out = dis.forward(x)
        r_j = dc.slice_batch(out.reflectance, 0, 1)
        r_k = dc.slice_batch(out.reflectance, 1, 2)
        i_j = dc.slice_batch(out.illumination, 0, 1)
        i_k = dc.slice_batch(out.illumination, 1, 2)
        loss = semantic_disentangle_loss(seg, r_j, i_j, y, r_k, i_k, y, r_j, r_k)
        backward(loss)
    norms = [float(np.abs(p.grad).sum()) for p in dis.params() if p.grad is not None]
    assert norms and sum(norms) > 0.0


# ----------------------------------------------------------------- train step

def _tiny_batch(rng, n=4, hw=(32, 64)):
    imgs, lbls = [], []
    for idx in range(n):
        scene = synth_scene(int(rng.integers(0, 2 ** 31)), hw=hw, k_lights=3)
        imgs.append(render(scene, 0.0))
        lbls.append(scene.labels.astype(np.int64))
    return np.stack(imgs), np.stack(lbls)


def _tiny_setup(seed=0):
    dis = DisentangleNet("small", seed=seed)
    seg = IAParserNet(6, 16, seed=seed + 1)
    opt = AdamW(dis.params() + seg.params(), lr=6e-5)
    return dis, seg, opt


def test_train_step_terms_finite_and_nonnegative():
    rng = np.random.default_rng(15)
    imgs, lbls = _tiny_batch(rng)
    dis, seg, opt = _tiny_setup()
    terms = sod_train_step(dis, seg, opt, imgs, lbls, DisturbSchedule(10, 100),
                           SodWeights(), GuidanceNoiseConfig(), rng)
    for v in (terms.l_disentangle, terms.l_retinex, terms.l_smooth, terms.l_sede, terms.total):
        assert np.isfinite(v) and v >= 0.0


def test_train_step_rejects_odd_batch():
    rng = np.random.default_rng(16)
    imgs, lbls = _tiny_batch(rng, n=3)
    dis, seg, opt = _tiny_setup()
    with pytest.raises(ConfigError):
        sod_train_step(dis, seg, opt, imgs, lbls, DisturbSchedule(0, 10),
                       SodWeights(), GuidanceNoiseConfig(), rng)


def test_train_is_deterministic_for_10_steps():
    def run():
        rng = np.random.default_rng(17)
        dis, seg, opt = _tiny_setup(seed=4)
        hist = []
        data_rng = np.random.default_rng(18)
        for t in range(10):
            imgs, lbls = _tiny_batch(data_rng)
            terms = sod_train_step(dis, seg, opt, imgs, lbls,
                                   DisturbSchedule(t, 10), SodWeights(),
                                   GuidanceNoiseConfig(), rng)
            hist.append(terms.total)
        return hist

    assert run() == run()


@pytest.mark.slow
def test_descent_over_500_steps_three_seeds():
    drops = []
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        data_rng = np.random.default_rng(200 + seed)
        dis, seg, opt = _tiny_setup(seed=seed)
        first = last = None
        for t in range(500):
            imgs, lbls = _tiny_batch(data_rng)
            terms = sod_train_step(dis, seg, opt, imgs, lbls,
                                   DisturbSchedule(t, 500), SodWeights(),
                                   GuidanceNoiseConfig(), rng)
            if t == 0:
                first = terms.total
            last = terms.total
        drops.append(first - last)
    assert np.mean(drops) > 0.0
