import numpy as np
import pytest

from fewshot_forecast import autodiff as ad
from fewshot_forecast.autodiff import Tensor
from fewshot_forecast.errors import EmptySupportError, InsufficientHistoryError, ShapeError
from fewshot_forecast.model import ForecastModel, ModelConfig

import oracles

MICRO = ModelConfig(support_hidden=3, query_hidden=3, attention_dim=2, value_dim=2, head_hidden=3)


@pytest.fixture(scope="module")
def model():
    return ForecastModel.initialize(seed=0)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(1)
    return rng.normal(size=(3, 100)), rng.normal(size=(4, 100))


def test_default_sizes(model):
    assert model.params["support_fwd.w_hh"].shape == (128, 32)
    assert model.params["attention.k"].shape == (32, 64)
    assert model.params["head.0.w"].shape == (32, 64)
    assert model.params["head.2.w"].shape == (1, 32)
    assert len([k for k in model.params if k.startswith("head.") and k.endswith(".w")]) == 3


def test_constructor_checks_dimension_chain(model):
    bad = dict(model.params)
    bad["attention.k"] = Tensor(np.zeros((32, 63)))
    with pytest.raises(ShapeError):
        ForecastModel(model.config, bad)


def test_encode_support_sizes(model, data):
    support, _ = data
    enc = model.encode_support(support)
    assert len(enc) == 300 and enc.width == 64
    assert enc.index[0] == (0, 0) and enc.index[-1] == (2, 99)
    assert len(model.encode_support([[0.5]])) == 1


def test_support_series_encoded_independently(model, data):
    support, _ = data
    enc = model.encode_support(support)
    alone = model.encode_support([support[1]])
    assert np.array_equal(enc.states.data[100:200], alone.states.data)


def test_encode_support_errors(model):
    with pytest.raises(EmptySupportError):
        model.encode_support([])
    with pytest.raises(EmptySupportError):
        model.encode_support([[1.0], []])


def test_zeroed_output_layer_gives_zero(model, data):
    support, queries = data
    m = model.clone()
    m.params["head.2.w"].data[:] = 0.0
    m.params["head.2.b"].data[:] = 0.0
    enc = m.encode_support(support)
    assert m.forecast_next(queries[0][:17], enc).item() == 0.0


@pytest.mark.parametrize("length", [1, 50, 99])
def test_forecast_next_is_finite_scalar(model, data, length):
    support, queries = data
    y = model.forecast_next(queries[0][:length], model.encode_support(support))
    assert y.shape == () and np.isfinite(y.item())


def test_forecast_next_requires_history(model, data):
    with pytest.raises(InsufficientHistoryError):
        model.forecast_next([], model.encode_support(data[0]))


def test_forecast_next_matches_composed_oracle():
    m = ForecastModel.initialize(ModelConfig(support_hidden=4, query_hidden=3, attention_dim=3,
                                             value_dim=2, head_hidden=5), seed=3)
    rng = np.random.default_rng(4)
    support = [rng.normal(size=7), rng.normal(size=5)]
    prefix = rng.normal(size=6)
    got = m.forecast_next(prefix, m.encode_support(support)).item()
    ref = oracles.forecast_next({k: p.data for k, p in m.params.items()}, prefix, support)
    assert abs(got - ref) < 1e-10


def test_forecast_series_lengths(model, data):
    support, queries = data
    enc = model.encode_support(support)
    assert model.forecast_series(queries[0][:2], enc).shape == (1,)
    assert model.forecast_series(queries[0], enc).shape == (99,)
    with pytest.raises(InsufficientHistoryError):
        model.forecast_series(queries[0][:1], enc)


def test_forecast_series_equals_prefix_evaluation_bit_exactly(model, data):
    support, queries = data
    enc = model.encode_support(support)
    series = queries[1][:40]
    preds = model.forecast_series(series, enc).data
    direct = [model.forecast_next(series[:t], enc).item() for t in range(1, 40)]
    assert preds.tolist() == direct


def test_batched_prediction_agrees(model, data):
    support, queries = data
    enc = model.encode_support(support)
    batched = model.predict_many(list(queries) + [queries[0][:30]], enc)
    assert len(batched[-1]) == 29
    for q, b in zip(queries, batched):
        assert np.max(np.abs(model.forecast_series(q, enc).data - b)) < 1e-12


def test_support_permutation_invariance(model, data):
    support, queries = data
    enc = model.encode_support(support)
    order = np.random.default_rng(0).permutation(len(enc))
    a = model.forecast_next(queries[0][:20], enc).item()
    b = model.forecast_next(queries[0][:20], enc.permuted(order)).item()
    c = model.forecast_next(queries[0][:20], model.encode_support(support[::-1])).item()
    assert abs(a - b) < 1e-12 and abs(a - c) < 1e-12


def test_one_parameter_set_serves_any_support_size(model):
    rng = np.random.default_rng(5)
    prefix = rng.normal(size=30)
    for n in (1, 3, 10):
        y = model.forecast_next(prefix, model.encode_support(rng.normal(size=(n, 100))))
        assert np.isfinite(y.item())


def test_determinism(model, data):
    support, queries = data
    a = model.forecast_series(queries[2], model.encode_support(support)).data
    b = model.forecast_series(queries[2], model.encode_support(support)).data
    assert np.array_equal(a, b)


def test_loss_of_constant_output_matches_two_loops(model):
    m = model.clone()
    m.params["head.2.w"].data[:] = 0.0
    m.params["head.2.b"].data[:] = 0.3
    rng = np.random.default_rng(6)
    queries = [rng.normal(size=20), rng.normal(size=12), rng.normal(size=20)]
    loss = m.batch_loss(queries, m.encode_support([rng.normal(size=10)])).item()
    per_series = []
    for q in queries:
        errs = [(0.3 - q[t]) ** 2 for t in range(1, len(q))]
        per_series.append(sum(errs) / len(errs))
    assert abs(loss - sum(per_series) / len(per_series)) < 1e-12


def test_zero_model_on_zero_queries_has_zero_loss(model):
    m = model.clone()
    m.params["head.2.w"].data[:] = 0.0
    m.params["head.2.b"].data[:] = 0.0
    assert m.batch_loss([np.zeros(10)] * 3, m.encode_support([np.ones(5)])).item() == 0.0


def test_loss_is_invariant_to_query_order(model, data):
    support, queries = data
    enc = model.encode_support(support)
    a = model.batch_loss(list(queries), enc).item()
    b = model.batch_loss(list(queries[::-1]), enc).item()
    assert abs(a - b) < 1e-12


def test_include_t1_predicts_first_value(data):
    m = ForecastModel.initialize(ModelConfig(include_t1=True), seed=0)
    support, queries = data
    enc = m.encode_support(support)
    preds = m.forecast_series(queries[0], enc).data
    assert preds.shape == (100,)
    assert preds[0] == m.forecast_next([], enc).item()
    assert np.array_equal(preds[1:5], [m.forecast_next(queries[0][:t], enc).item() for t in range(1, 5)])
    assert len(m.predict_many([queries[0]], enc)[0]) == 100


def test_save_load_round_trip(tmp_path):
    m = ForecastModel.initialize(ModelConfig(scale_scores=True, value_dim=7), seed=9)
    path = m.save(tmp_path / "m.npz", extra={"note": "x"})
    back = ForecastModel.load(path)
    assert back.config == m.config
    assert back.params.keys() == m.params.keys()
    assert all(np.array_equal(back.params[k].data, m.params[k].data) for k in m.params)


def test_load_rejects_other_archives(tmp_path):
    from fewshot_forecast.baselines import BaseNet

    path = BaseNet.initialize("nn").save(tmp_path / "b.npz")
    with pytest.raises(ValueError):
        ForecastModel.load(path)


def test_micro_model_full_gradient():
    m = ForecastModel.initialize(MICRO, seed=2)
    rng = np.random.default_rng(3)
    support = [rng.normal(size=6), rng.normal(size=6)]
    queries = [rng.normal(size=6), rng.normal(size=6)]

    def build():
        return m.batch_loss(queries, m.encode_support(support))

    ad.zero_grad(m.params)
    ad.backward(build())
    for name, p in m.params.items():
        def f():
            with ad.no_grad():
                return build().item()

        err = oracles.relative_error(p.grad, oracles.central_difference(f, p.data))
        assert err < 1e-4, name
