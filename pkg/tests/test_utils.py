import numpy as np
import pytest

from herdlab.utils import check_seed, make_grid, n_threads, parse_float_list, prng_key


def test_make_grid():
    assert np.allclose(make_grid(0, 4, 0.1), np.arange(41) / 10)
    assert np.allclose(make_grid(0, 1, 0.3), [0, 0.3, 0.6, 0.9])
    with pytest.raises(ValueError, match="positive"):
        make_grid(0, 1, 0)


def test_parse_float_list():
    assert parse_float_list("0.1, 0.2,0.7") == [0.1, 0.2, 0.7]
    assert len(parse_float_list("0:4:0.1")) == 41
    with pytest.raises(ValueError, match="Cannot parse"):
        parse_float_list("0.1,abc")


def test_seeds():
    assert check_seed(2**64 - 1) == 2**64 - 1
    with pytest.raises(ValueError):
        check_seed(2**64)
    with pytest.raises(ValueError):
        check_seed(-1)

    # distinct high bits give distinct keys
    a = prng_key(1)
    b = prng_key(1 + 2**32)
    assert not np.array_equal(np.asarray(a), np.asarray(b))


def test_n_threads(monkeypatch, caplog):
    monkeypatch.setenv("HERDLAB_THREADS", "3")
    assert n_threads() == 3
    monkeypatch.setenv("HERDLAB_THREADS", "zero")
    assert n_threads() >= 1
    assert "Ignoring invalid" in caplog.text
