from datetime import datetime, timedelta

import numpy as np
import pytest

from memforecast import tensor as T
from memforecast.data import calendar_features
from memforecast.embedding import DataEmbedding, positional_encoding
from memforecast.errors import ConfigurationError, IngestionError
from memforecast.tensor import Tensor


def marks_for(n, start=datetime(2020, 1, 1)):
    return np.array([calendar_features(start + timedelta(hours=k)) for k in range(n)], dtype=np.int64)


@pytest.fixture
def emb():
    e = DataEmbedding(3, 8, np.random.default_rng(0))
    e.eval()
    return e


def test_zero_input_leaves_only_fixed_encodings(emb):
    marks = marks_for(5)
    out = emb(np.zeros((5, 3)), marks)
    np.testing.assert_allclose(out.data, positional_encoding(5, 8) + emb.seasonal(marks), atol=1e-15)


def test_context_vector_is_linear(emb):
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    cv = lambda x: emb.context_vector(Tensor(x)).data
    np.testing.assert_allclose(cv(2 * a + b), 2 * cv(a) + cv(b), atol=1e-12)


def test_positional_values():
    pe = positional_encoding(2, 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
    np.testing.assert_allclose(pe[1], [0.8414709848078965, 0.5403023058681398,
                                       0.009999833334166665, 0.9999500004166653], atol=1e-15)


def test_positional_rejects_odd_width():
    with pytest.raises(ConfigurationError):
        positional_encoding(4, 7)


def test_seasonal_differs_by_hour_table_only(emb):
    a = marks_for(1, datetime(2020, 1, 1, 3))
    b = marks_for(1, datetime(2020, 1, 1, 4))
    hour = emb.seasonal_tables[3]
    np.testing.assert_allclose(emb.seasonal(b) - emb.seasonal(a), hour[4:5] - hour[3:4], atol=1e-15)


def test_embedding_recomposes(emb):
    x = np.random.default_rng(2).standard_normal((7, 3))
    marks = marks_for(7)
    out = emb(x, marks).data
    expected = emb.delta * emb.context_vector(Tensor(x)).data + positional_encoding(7, 8) + emb.seasonal(marks)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_delta_scales_context_only():
    x = np.random.default_rng(3).standard_normal((4, 3))
    marks = marks_for(4)
    e1 = DataEmbedding(3, 8, np.random.default_rng(0), delta=1.0)
    e2 = DataEmbedding(3, 8, np.random.default_rng(0), delta=2.0)
    fixed = positional_encoding(4, 8) + e1.seasonal(marks)
    np.testing.assert_allclose(e2(x, marks).data - fixed, 2 * (e1(x, marks).data - fixed), atol=1e-12)
    with pytest.raises(ConfigurationError):
        DataEmbedding(3, 8, np.random.default_rng(0), delta=0.0)


def test_out_of_range_mark_rejected(emb):
    marks = marks_for(4)
    marks[1, 3] = 24
    with pytest.raises(IngestionError):
        emb(np.zeros((4, 3)), marks)


def test_kernel_gradient():
    e = DataEmbedding(2, 4, np.random.default_rng(5))
    x = Tensor(np.random.default_rng(6).standard_normal((5, 2)))
    marks = marks_for(5)
    assert T.grad_check(lambda k: (setattr(e, "conv_kernel", k), e(x, marks))[1], e.conv_kernel) < 1e-6


def test_calendar_tables_are_frozen():
    e = DataEmbedding(2, 4, np.random.default_rng(5))
    names = {n for n, _ in e.named_parameters()}
    assert names == {"conv_kernel"}
    before = [t.copy() for t in e.seasonal_tables]
    T.reset_tape()
    out = e(np.ones((3, 2)), marks_for(3))
    T.backward(T.sum_all(out))
    assert all(np.array_equal(a, b) for a, b in zip(before, e.seasonal_tables))


@pytest.mark.parametrize("d_model", [64, 128])
def test_positions_do_not_alias(d_model):
    pe = positional_encoding(1024, d_model)
    unit = pe / np.linalg.norm(pe, axis=1, keepdims=True)
    cos = unit @ unit.T
    np.fill_diagonal(cos, -1.0)
    assert cos.max() < 1 - 1e-6
