import json

import pytest
import torch
from hypothesis import given, settings, strategies as st

from respagent.cfm import (
    CFMTrainConfig,
    LinearVelocity,
    VelocityNet,
    build_condition,
    cfm_loss,
    component_report,
    euler_sample,
    gmm_sampler,
    gradcheck,
    interpolate,
    load_mel,
    sampler_log,
    save_mel,
    toy_mel,
    train_cfm,
    velocity_target,
)
from respagent.errors import InvalidArgument, NumericInputError
from respagent.unit_generator import UnitSequence


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestPath:
    def test_endpoints_bit_exact(self):
        x0, x1 = _rand(3, 5, seed=1), _rand(3, 5, seed=2)
        assert torch.equal(interpolate(x0, x1, 0.0), x0)
        assert torch.equal(interpolate(x0, x1, 1.0), x1)

    def test_midpoint(self):
        assert interpolate(torch.zeros(1), torch.full((1,), 2.0), 0.5).item() == 1.0

    def test_per_sample_t(self):
        x0, x1 = torch.zeros(2, 3), torch.ones(2, 3)
        xt = interpolate(x0, x1, torch.tensor([0.25, 0.75]))
        assert xt[0].tolist() == [0.25] * 3 and xt[1].tolist() == [0.75] * 3

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), t=st.floats(0.0, 1.0))
    def test_swap_identity(self, seed, t):
        x0, x1 = _rand(4, 3, seed=seed), _rand(4, 3, seed=seed + 1)
        assert torch.allclose(interpolate(x0, x1, t) + interpolate(x1, x0, t), x0 + x1, atol=1e-12)

    def test_errors(self):
        with pytest.raises(InvalidArgument):
            interpolate(torch.zeros(2), torch.zeros(3), 0.5)
        with pytest.raises(InvalidArgument):
            interpolate(torch.zeros(2), torch.zeros(2), 1.5)

    def test_velocity_target(self):
        x = _rand(3, 2)
        assert torch.equal(velocity_target(x, x), torch.zeros_like(x))
        assert velocity_target(torch.tensor(1.0), torch.tensor(3.0)).item() == 2.0
        y = _rand(3, 2, seed=5)
        assert torch.equal(velocity_target(x, y), -velocity_target(y, x))
        with pytest.raises(InvalidArgument):
            velocity_target(torch.zeros(2), torch.zeros(3))


class TestCondition:
    def _embed(self, V=8, E=3):
        return torch.nn.Embedding(V, E)

    def test_verbatim(self):
        emb = self._embed()
        u = UnitSequence([3, 1, 4, 1], V=8)
        c = build_condition(u, emb, torch.ones(5, 2), torch.zeros(4, 6), 0, 4)
        assert torch.equal(c.content, emb.weight[[3, 1, 4, 1]])

    def test_nearest_upsample(self):
        emb = self._embed()
        c = build_condition(UnitSequence([2, 5], V=8), emb, torch.ones(3, 2), torch.zeros(4, 6), 0, 4)
        assert torch.equal(c.content, emb.weight[[2, 2, 5, 5]])

    def test_prefix_and_timbre(self):
        ref = _rand(10, 6).float()
        timbre = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        c = build_condition(UnitSequence([1, 2, 3], V=8), self._embed(), timbre, ref, 3, 10)
        assert torch.equal(c.ref_prefix[:3], ref[:3])
        assert torch.equal(c.ref_prefix[3:], torch.zeros(7, 6))
        assert c.timbre.tolist() == [2.0, 3.0]
        assert c.as_tensor().shape == (10, 3 + 2 + 6)
        assert c.content.shape[0] == 10

    def test_zero_prefix(self):
        c = build_condition(UnitSequence([1], V=8), self._embed(), torch.ones(1, 2), _rand(5, 4), 0, 5)
        assert not c.ref_prefix.any()

    def test_default_prefix(self):
        c = build_condition(UnitSequence([1], V=8), self._embed(), torch.ones(1, 2), _rand(20, 4), None, 20)
        assert c.r == 2

    def test_linear_mode(self):
        table = torch.tensor([[0.0], [3.0]])
        c = build_condition(UnitSequence([0, 1], V=2), table, torch.ones(1, 1), torch.zeros(4, 1), 0, 4,
                            mode="linear")
        assert torch.allclose(c.content.flatten(), torch.tensor([0.0, 1.0, 2.0, 3.0]))

    def test_errors(self):
        emb = self._embed()
        with pytest.raises(InvalidArgument):
            build_condition(UnitSequence([], V=8), emb, torch.ones(1, 2), torch.zeros(4, 2), 0, 4)
        with pytest.raises(InvalidArgument):
            build_condition(UnitSequence([1], V=8), emb, torch.ones(1, 2), torch.zeros(4, 2), 5, 4)
        with pytest.raises(InvalidArgument):
            build_condition(UnitSequence([1], V=8), emb, torch.ones(1, 2), torch.zeros(4, 2), 0, 0)


class TestLoss:
    def test_teacher_zero(self):
        x0, x1 = _rand(6, 4, seed=1), _rand(6, 4, seed=2)
        oracle = lambda x, c, t: x1 - x0  # noqa: E731
        assert cfm_loss(oracle, x0, x1, torch.rand(6, dtype=torch.float64), None).item() == 0.0

    def test_closed_form(self):
        x1 = torch.tensor([[2.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
        zero = lambda x, c, t: torch.zeros_like(x)  # noqa: E731
        val = cfm_loss(zero, torch.zeros_like(x1), x1, torch.tensor([0.3], dtype=torch.float64), None)
        assert val.item() == pytest.approx(4 / x1.numel())

    def test_permutation_invariant(self):
        net = VelocityNet(3, 2, hidden=16, depth=1).double()
        x0, x1, c = _rand(8, 3, seed=1), _rand(8, 3, seed=2), _rand(8, 2, seed=3)
        t = torch.rand(8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        perm = torch.randperm(8, generator=torch.Generator().manual_seed(1))
        a = cfm_loss(net, x0, x1, t, c)
        b = cfm_loss(net, x0[perm], x1[perm], t[perm], c[perm])
        assert a.item() == pytest.approx(b.item(), abs=1e-14)

    def test_nan_reports_index(self):
        x1 = torch.zeros(4, 2)
        x1[2, 1] = float("nan")
        ident = lambda x, c, t: x  # noqa: E731
        with pytest.raises(NumericInputError, match="index 2"):
            cfm_loss(ident, torch.zeros(4, 2), x1, torch.full((4,), 0.5), None)


class TestSampler:
    @pytest.mark.parametrize("N", [1, 4, 32])
    def test_constant_field_exact(self, N):
        c0 = torch.tensor([0.5, -1.25], dtype=torch.float64)
        x0 = _rand(5, 2, seed=4)
        out = euler_sample(lambda x, c, t: c0.expand_as(x), None, x0.shape, steps=N, x0=x0.clone())
        assert torch.allclose(out, x0 + c0, atol=1e-12)

    def test_oracle_target_field(self):
        target = torch.tensor([[1.5, -2.0, 0.25]], dtype=torch.float64)
        field = lambda x, c, t: (target - x) / (1 - t.unsqueeze(-1))  # noqa: E731
        out = euler_sample(field, None, (1, 3), steps=256, seed=3, dtype=torch.float64)
        assert (out - target).abs().max() < 1e-2

    def test_deterministic(self):
        net = VelocityNet(2, 2, hidden=8, depth=1)
        c = torch.eye(2)
        a = euler_sample(net, c, (2, 2), steps=8, seed=11)
        b = euler_sample(net, c, (2, 2), steps=8, seed=11)
        assert torch.equal(a, b)

    def test_bad_args(self):
        with pytest.raises(InvalidArgument):
            euler_sample(lambda x, c, t: x, None, (1, 1), steps=0)
        with pytest.raises(InvalidArgument):
            euler_sample(lambda x, c, t: x, None, (1, 1), sigma=0.0)

    def test_log(self):
        rec = sampler_log(torch.eye(2), 32, 1.0, 7)
        assert json.loads(json.dumps(rec))["steps"] == 32


class TestGradcheck:
    def _batch(self, B=6, d=3, c=2):
        return _rand(B, d, seed=1), _rand(B, d, seed=2), torch.rand(B, dtype=torch.float64), _rand(B, c, seed=3)

    def test_linear(self):
        torch.manual_seed(0)
        assert gradcheck(LinearVelocity(3, 2), *self._batch()) < 1e-8

    def test_mlp(self):
        torch.manual_seed(0)
        assert gradcheck(VelocityNet(3, 2, hidden=16, depth=2), *self._batch(), n_coords=96) < 1e-4

    def test_step_sweep_stable(self):
        torch.manual_seed(0)
        net = VelocityNet(3, 2, hidden=16, depth=2)
        errs = [gradcheck(net, *self._batch(), h=h) for h in (1e-4, 1e-5)]
        floor = 1e-9
        assert max(errs) / max(min(errs), floor) < 10 or max(errs) < 1e-7


class TestToyMel:
    def test_roundtrip(self, tmp_path):
        mel = toy_mel(UnitSequence([1, 5, 2], V=8), bins=6, frames=9)
        save_mel(tmp_path / "m.f32", mel)
        assert torch.equal(load_mel(tmp_path / "m.f32"), mel)


MEANS = torch.tensor([[-2.0, 0.0], [2.0, 0.0]])


@pytest.fixture(scope="module")
def gmm_net():
    cfg = CFMTrainConfig(hidden=64, depth=2, steps=1500, batch_size=256, seed=0)
    net, losses = train_cfm(gmm_sampler(MEANS, std=0.3), 2, 2, cfg)
    return net, losses


class TestTrainedToy:
    @pytest.mark.parametrize("comp", [0, 1])
    def test_purity_and_mean(self, gmm_net, comp):
        net, _ = gmm_net
        cond = torch.nn.functional.one_hot(torch.full((1000,), comp), 2).float()
        samples = euler_sample(net, cond, (1000, 2), steps=32, seed=100 + comp)
        rep = component_report(samples, MEANS, comp)
        assert rep["purity"] >= 0.95
        assert rep["mean_error"] <= 0.15

    def test_loss_decreases(self, gmm_net):
        _, losses = gmm_net
        assert sum(losses[-100:]) < sum(losses[:100])
