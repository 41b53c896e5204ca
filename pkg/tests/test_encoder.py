import numpy as np
import pytest

from puvdet import encoder
from puvdet.encoder import (
    ContrastGroup,
    EncoderModel,
    LabeledBatch,
    ObjectiveBatch,
    TrainConfig,
    TrainingSet,
    init_model,
    load_checkpoint,
    param_count,
    predict_proba,
    predict_proba_batch,
    save_checkpoint,
    train,
    zero_model,
)
from puvdet.errors import DimensionError, NumericError, TrainingError, ValidationError
from puvdet.losses import MrlConfig


def finite_difference(model, batch, objective, mcfg=None, step=1e-4):
    base = model.params.copy()
    g = np.zeros_like(base)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += step
        minus[i] -= step
        lp, _ = encoder.loss_and_grad(model.with_params(plus), batch, objective, mcfg)
        lm, _ = encoder.loss_and_grad(model.with_params(minus), batch, objective, mcfg)
        g[i] = (lp - lm) / (2 * step)
    return g


def max_rel_err(a, b):
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def random_group(rng, dim, b=3, with_labels=True):
    labels = tuple(int(v) for v in rng.integers(0, 2, b))
    anchor_label = labels[rng.integers(0, b)]  # guarantee a same-label member
    return ContrastGroup(
        anchor=rng.normal(size=dim),
        members=rng.normal(size=(b, dim)),
        positive_index=int(rng.integers(0, b)),
        member_labels=labels if with_labels else None,
        anchor_label=anchor_label if with_labels else None,
    )


class TestPredict:
    def test_zero_parameters_give_even_odds(self):
        model = zero_model(6, 4, 3)
        assert predict_proba(model, np.ones(6)) == (0.5, 0.5)

    def test_probabilities_sum_to_one(self):
        model = init_model(8, 5, 3, seed=1)
        rng = np.random.default_rng(0)
        for _ in range(20):
            p_neg, p_pos = predict_proba(model, rng.normal(size=8))
            assert abs(p_neg + p_pos - 1.0) <= 1e-9

    def test_deterministic(self):
        model = init_model(8, 5, 3, seed=0)
        x = np.arange(8.0)
        assert predict_proba(model, x) == predict_proba(model, x)

    def test_dimension_mismatch(self):
        model = init_model(8, 5, 3, seed=0)
        with pytest.raises(DimensionError):
            predict_proba(model, np.ones(7))

    def test_parameter_count_formula(self):
        model = init_model(11, 7, 5, seed=0)
        assert model.params.size == param_count(11, 7, 5) == 11 * 7 + 7 + 7 * 2 + 2 + 7 * 5 + 5

    def test_bad_layout_rejected(self):
        with pytest.raises(ValidationError):
            EncoderModel(4, 3, 2, np.zeros(5))


class TestGrad:
    def test_zero_weight_batch_zero_gradient(self):
        model = init_model(4, 3, 2, seed=2)
        batch = ObjectiveBatch(labeled=LabeledBatch(
            X=np.random.default_rng(0).normal(size=(3, 4)),
            y=[0, 1, 0], w=[0.0, 0.0, 0.0]))
        assert not np.any(encoder.grad(model, batch, "ce"))

    def test_ce_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        model = init_model(4, 3, 2, seed=3)
        batch = ObjectiveBatch(labeled=LabeledBatch(
            X=rng.normal(size=(2, 4)), y=[1, 0], w=[1.0, 0.5]))
        _, analytic = encoder.loss_and_grad(model, batch, "ce")
        assert max_rel_err(analytic, finite_difference(model, batch, "ce")) <= 1e-4

    def test_duplicated_batch_doubles_gradient_exactly(self):
        rng = np.random.default_rng(4)
        model = init_model(5, 3, 2, seed=4)
        X = rng.normal(size=(2, 5))
        y = np.array([0, 1])
        w = np.array([0.8, 0.4])
        single = encoder.grad(model, ObjectiveBatch(labeled=LabeledBatch(X=X, y=y, w=w)), "ce")
        doubled = encoder.grad(model, ObjectiveBatch(labeled=LabeledBatch(
            X=np.repeat(X, 2, axis=0), y=np.repeat(y, 2), w=np.repeat(w, 2))), "ce")
        assert np.array_equal(doubled, 2 * single)

    @pytest.mark.parametrize("objective", ["self", "weak", "metric"])
    def test_contrastive_objectives_match_finite_differences(self, objective):
        rng = np.random.default_rng(5)
        model = init_model(4, 3, 2, seed=5)
        mcfg = MrlConfig(alpha=0.3, tau=0.5, batch_b=2)
        batch = ObjectiveBatch(
            labeled=LabeledBatch(X=rng.normal(size=(2, 4)), y=[0, 1], w=[1.0, 1.0]),
            groups=(random_group(rng, 4), random_group(rng, 4, b=4)),
        )
        _, analytic = encoder.loss_and_grad(model, batch, objective, mcfg)
        fd = finite_difference(model, batch, objective, mcfg)
        assert max_rel_err(analytic, fd) <= 1e-4

    def test_empty_batch_rejected(self):
        model = init_model(4, 3, 2, seed=0)
        with pytest.raises(ValidationError):
            encoder.grad(model, ObjectiveBatch(), "ce")

    def test_nonfinite_loss_names_sample(self):
        model = init_model(2, 3, 2, seed=0)
        bad = model.with_params(np.full_like(model.params, np.nan))
        batch = ObjectiveBatch(labeled=LabeledBatch(
            X=np.ones((1, 2)), y=[1], w=[1.0], ids=("s7",)))
        with pytest.raises(NumericError, match="s7"):
            encoder.grad(bad, batch, "ce")


def separable_set(n=20, seed=0):
    rng = np.random.default_rng(seed)
    X0 = rng.normal((-2.0, -2.0), 0.4, size=(n // 2, 2))
    X1 = rng.normal((2.0, 2.0), 0.4, size=(n // 2, 2))
    X = np.vstack([X0, X1])
    y = np.array([0] * (n // 2) + [1] * (n // 2))
    return TrainingSet(X=X, y=y, w=np.ones(n))


class TestTrain:
    def test_fits_linearly_separable_toy_set(self):
        data = separable_set()
        model = init_model(2, 8, 2, seed=0)
        cfg = TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=200, seed=0)
        result = train(model, data, cfg)
        assert encoder.accuracy(result.model, data.X, data.y) == 1.0
        assert len(result.history) <= 200

    def test_zero_epochs_is_noop(self):
        data = separable_set()
        model = init_model(2, 4, 2, seed=1)
        result = train(model, data, TrainConfig(max_epochs=0, seed=0))
        assert np.array_equal(result.model.params, model.params)
        assert result.history == ()

    def test_same_seed_identical_history(self):
        data = separable_set()
        model = init_model(2, 4, 2, seed=1)
        cfg = TrainConfig(learning_rate=0.01, batch_size=4, max_epochs=10, seed=9)
        r1 = train(model, data, cfg)
        r2 = train(model, data, cfg)
        assert r1.history == r2.history
        assert np.array_equal(r1.model.params, r2.model.params)

    def test_zero_learning_rate_keeps_parameters(self):
        data = separable_set()
        model = init_model(2, 4, 2, seed=2)
        for opt in ("sgd", "adam"):
            result = train(model, data, TrainConfig(learning_rate=0.0, batch_size=4,
                                                    max_epochs=7, seed=0, optimizer=opt))
            assert np.max(np.abs(result.model.params - model.params)) <= 1e-12

    def test_divergence_raises_with_epoch(self):
        data = separable_set()
        broken = init_model(2, 4, 2, seed=3)
        params = broken.params.copy()
        params[0] = np.nan
        cfg = TrainConfig(learning_rate=0.01, batch_size=4, max_epochs=5, seed=0,
                          optimizer="sgd")
        with pytest.raises(TrainingError, match="epoch 1"):
            train(broken.with_params(params), data, cfg)

    def test_early_stopping_returns_best_epoch(self):
        data = separable_set(n=40, seed=4)
        model = init_model(2, 8, 2, seed=4)
        valid = (data.X, data.y)
        cfg = TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=50, seed=0)
        result = train(model, data, cfg, valid=valid)
        # stopped when accuracy plateaued, well before the epoch cap
        assert len(result.history) < 50
        best = max(r.val_accuracy for r in result.history)
        assert encoder.accuracy(result.model, *valid) == best

    def test_empty_validation_disables_early_stop(self):
        data = separable_set()
        model = init_model(2, 4, 2, seed=5)
        cfg = TrainConfig(learning_rate=0.01, batch_size=4, max_epochs=6, seed=0)
        result = train(model, data, cfg, valid=(np.zeros((0, 2)), np.zeros(0)))
        assert len(result.history) == 6

    def test_metric_objective_trains(self):
        data = separable_set(n=30, seed=6)
        model = init_model(2, 8, 4, seed=6)
        cfg = TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=40, seed=0)
        result = train(model, data, cfg, objective="metric",
                       mcfg=MrlConfig(alpha=0.5, tau=0.5, batch_b=4))
        assert encoder.accuracy(result.model, data.X, data.y) >= 0.9


class TestCheckpoint:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        model = init_model(6, 5, 3, seed=8)
        path = tmp_path / "m.puvm"
        save_checkpoint(path, model)
        back = load_checkpoint(path)
        assert back.dim == 6 and back.hidden == 5 and back.proj_dim == 3
        assert np.array_equal(back.params, model.params)
        x = np.linspace(-1, 1, 6)
        assert predict_proba(back, x) == predict_proba(model, x)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "m.puvm"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValidationError, match="not a model checkpoint"):
            load_checkpoint(path)


def test_projection_rows_unit_norm():
    model = init_model(5, 4, 3, seed=9)
    Z = encoder.project(model, np.random.default_rng(0).normal(size=(7, 5)))
    assert np.allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-12)


def test_predict_batch_matches_single():
    model = init_model(5, 4, 3, seed=10)
    X = np.random.default_rng(1).normal(size=(4, 5))
    batch = predict_proba_batch(model, X)
    for k in range(4):
        single = predict_proba(model, X[k])
        assert single == pytest.approx((batch[k, 0], batch[k, 1]), rel=1e-12)
