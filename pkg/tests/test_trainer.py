import numpy as np
import pytest

from gpode import models, trainer
from gpode.errors import ContractError, DimensionError


def tiny_traj(n=8, d=2, seed=0):
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 1.4, n)
    y = np.cumsum(0.25 * rng.standard_normal((n, d)), axis=0)
    return models.Trajectory(times, y)


def tiny_config(**kw):
    base = dict(
        steps=5,
        seed=1,
        m_inducing=3,
        fourier_count=16,
        solver=models.SolverSettings(substeps=3),
    )
    base.update(kw)
    return trainer.TrainConfig(**base)


class TestAdamStep:
    def test_first_step_magnitude_is_learning_rate(self):
        params = {"w": np.array([1.0, -2.0, 5.0])}
        grads = {"w": np.array([0.3, -4.0, 1.0])}
        new, _ = trainer.adam_step(params, grads, trainer.adam_init(params), lr=0.05)
        step = np.abs(new["w"] - params["w"])
        np.testing.assert_allclose(step, 0.05, rtol=1e-6)

    def test_zero_gradient_keeps_parameters(self):
        params = {"w": np.array([1.0, 2.0])}
        state = trainer.adam_init(params)
        new, state = trainer.adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(new["w"], params["w"])

    def test_moments_decay_under_zero_gradient(self):
        params = {"w": np.array([1.0])}
        state = trainer.adam_init(params)
        state["m"]["w"] = np.array([0.5])
        state["v"]["w"] = np.array([0.25])
        _, state = trainer.adam_step(params, {"w": np.zeros(1)}, state, lr=0.1)
        np.testing.assert_allclose(state["m"]["w"], 0.45)
        np.testing.assert_allclose(state["v"]["w"], 0.25 * 0.999)

    def test_three_step_hand_recurrence(self):
        # Hand-rolled Adam recurrences as the oracle.
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        g = np.ones(3)
        theta = np.zeros(3)
        m = np.zeros(3)
        v = np.zeros(3)
        expect = []
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1**t)
            vh = v / (1 - b2**t)
            theta = theta - lr * mh / (np.sqrt(vh) + eps)
            expect.append(theta.copy())

        params = {"w": np.zeros(3)}
        state = trainer.adam_init(params)
        for t in range(3):
            params, state = trainer.adam_step(params, {"w": g}, state, lr=lr)
            np.testing.assert_array_equal(params["w"], expect[t])

    def test_shape_mismatch_rejected(self):
        params = {"w": np.zeros(3)}
        with pytest.raises(DimensionError):
            trainer.adam_step(params, {"w": np.zeros(4)}, trainer.adam_init(params), 0.1)

    def test_quadratic_convergence(self):
        rng = np.random.default_rng(2)
        target = rng.standard_normal(6)
        params = {"w": np.zeros(6)}
        state = trainer.adam_init(params)
        for _ in range(500):
            grads = {"w": 2.0 * (params["w"] - target)}
            params, state = trainer.adam_step(params, grads, state, lr=0.1)
        assert np.linalg.norm(params["w"] - target) < 1e-3


class TestTrain:
    def test_deterministic_trace(self):
        traj = tiny_traj()
        a = trainer.train(tiny_config(), traj)
        b = trainer.train(tiny_config(), traj)
        assert [r["elbo"] for r in a.trace] == [r["elbo"] for r in b.trace]
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_trace_rows_complete(self):
        traj = tiny_traj()
        res = trainer.train(tiny_config(steps=4), traj)
        assert len(res.trace) == 4
        for row in res.trace:
            assert {"step", "wall_clock", "elbo", "lr", "event"} <= set(row)
            assert np.isfinite(row["elbo"])

    def test_shooting_objective_runs(self):
        traj = tiny_traj()
        res = trainer.train(tiny_config(objective="shooting", steps=3), traj)
        assert "shooting_entropy" in res.trace[-1]

    def test_divergence_skips_and_halves_lr(self, monkeypatch):
        traj = tiny_traj()
        calls = {"n": 0}
        real = models.elbo_vanilla

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 2:
                raise trainer.NumericalError("synthetic divergence")
            return real(*args, **kwargs)

        monkeypatch.setattr(models, "elbo_vanilla", flaky)
        cfg = tiny_config(steps=4, learning_rate=0.02)
        res = trainer.train(cfg, traj)
        skipped = [r for r in res.trace if r["event"]]
        assert len(skipped) == 1
        assert skipped[0]["elbo"] == float("-inf")
        assert res.final_lr == pytest.approx(0.01)
        assert len(res.events) == 1

    def test_lr_floor(self, monkeypatch):
        traj = tiny_traj()

        def always_fail(*args, **kwargs):
            raise trainer.NumericalError("boom")

        monkeypatch.setattr(models, "elbo_vanilla", always_fail)
        res = trainer.train(tiny_config(steps=20, learning_rate=0.02), traj)
        assert res.final_lr == pytest.approx(1e-4)

    def test_checkpoint_roundtrip_bitwise(self, tmp_path):
        traj = tiny_traj(seed=3)
        ck = tmp_path / "ck.json"
        cfg_long = tiny_config(steps=6)
        full = trainer.train(cfg_long, traj)

        cfg_short = tiny_config(steps=4)
        trainer.train(cfg_short, traj, checkpoint_path=ck)
        resumed = trainer.train(cfg_long, traj, resume_from=ck)
        for k in full.params:
            assert np.array_equal(full.params[k], resumed.params[k]), k
        tail = [r["elbo"] for r in full.trace[4:]]
        assert [r["elbo"] for r in resumed.trace] == tail

    def test_checkpoint_config_mismatch_rejected(self, tmp_path):
        traj = tiny_traj()
        ck = tmp_path / "ck.json"
        trainer.train(tiny_config(steps=2), traj, checkpoint_path=ck)
        with pytest.raises(ContractError):
            trainer.train(tiny_config(steps=3, learning_rate=0.5), traj, resume_from=ck)

    def test_checkpoint_self_describing(self, tmp_path):
        traj = tiny_traj()
        ck = tmp_path / "ck.json"
        cfg = tiny_config(steps=2)
        trainer.train(cfg, traj, checkpoint_path=ck)
        bundle = trainer.load_checkpoint(ck)
        assert bundle["config_hash"] == cfg.hash()
        assert bundle["step"] == 2
        assert set(bundle["params"]) == set(models.PARAM_KEYS)

    def test_objective_improves_on_average(self):
        traj = tiny_traj(seed=5)
        res = trainer.train(tiny_config(steps=60, learning_rate=0.02), traj)
        elbos = np.array([r["elbo"] for r in res.trace])
        assert elbos[-10:].mean() > elbos[:10].mean()
