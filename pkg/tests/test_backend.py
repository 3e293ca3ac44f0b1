import pytest

from nodkit._backend import resolve_backend
from nodkit.maskops import kernels


def test_env_switch(monkeypatch):
    monkeypatch.setenv("NODKIT_BACKEND", "numpy")
    assert resolve_backend() == "numpy"
    assert kernels().__name__.endswith("_kernels_numpy")
    monkeypatch.setenv("NODKIT_BACKEND", "numba")
    assert resolve_backend() == "numba"
    assert kernels().__name__.endswith("_kernels_numba")


def test_default_prefers_numba(monkeypatch):
    monkeypatch.delenv("NODKIT_BACKEND", raising=False)
    assert resolve_backend() == "numba"


def test_explicit_argument_wins(monkeypatch):
    monkeypatch.setenv("NODKIT_BACKEND", "numba")
    assert resolve_backend("numpy") == "numpy"


def test_unknown_backend(monkeypatch):
    monkeypatch.setenv("NODKIT_BACKEND", "cuda")
    with pytest.raises(ValueError):
        resolve_backend()
