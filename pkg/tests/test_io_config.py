import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from morphassim.config import (ConfigError, RunSection, apply_overrides, bind, config_hash, input_path,
                               read_document, resolve_threads)
from morphassim.io import FormatError, read_csv, read_fmat, write_csv, write_fmat


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_fmat_roundtrip(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("f") / "a.fmat"
    write_fmat(p, a)
    assert np.array_equal(read_fmat(p), a)


def test_fmat_layout_is_column_major(tmp_path):
    write_fmat(tmp_path / "a.fmat", [[1.0, 2.0], [3.0, 4.0]])
    raw = (tmp_path / "a.fmat").read_bytes()
    assert raw[:8] == b"FMAT1\x00\x00\x00"
    assert np.array_equal(np.frombuffer(raw[24:], "<f8"), [1.0, 3.0, 2.0, 4.0])
    write_fmat(tmp_path / "v.fmat", np.arange(3.0))
    assert read_fmat(tmp_path / "v.fmat").shape == (3, 1)


def test_fmat_errors(tmp_path):
    (tmp_path / "short").write_bytes(b"FMAT")
    with pytest.raises(FormatError, match="truncated"):
        read_fmat(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXXXXXX" + bytes(16))
    with pytest.raises(FormatError, match="magic"):
        read_fmat(tmp_path / "magic")
    write_fmat(tmp_path / "ok", np.ones((2, 2)))
    (tmp_path / "cut").write_bytes((tmp_path / "ok").read_bytes()[:-8])
    with pytest.raises(FormatError, match="expected"):
        read_fmat(tmp_path / "cut")
    with pytest.raises(ValueError):
        write_fmat(tmp_path / "x", np.ones((2, 2, 2)))


def test_csv_exact_floats(tmp_path):
    write_csv(tmp_path / "a.csv", ["k", "v"], [[np.int64(3), 0.1 + 0.2], ["s", np.float32(0.5)]])
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["k", "v"] and rows[0] == ["3", repr(0.1 + 0.2)] and float(rows[1][1]) == 0.5


@dataclasses.dataclass(frozen=True)
class Demo:
    n: int
    x: float = 1.0
    names: tuple[str, ...] = ()
    pair: tuple[int, int] = (0, 0)
    maybe: float | None = None
    src: str = input_path(optional=True)


def test_bind_types_and_errors(tmp_path):
    (tmp_path / "f").write_text("")
    d = bind(Demo, {"s": {"n": 2, "x": 3, "names": ["a"], "pair": [1, 2], "src": "f"}}, "s", tmp_path)
    assert d == Demo(2, 3.0, ("a",), (1, 2), None, str(tmp_path / "f"))
    cases = [({"x": 1.0}, "s.n"), ({"n": 1.5}, "s.n"), ({"n": True}, "s.n"), ({"n": 1, "bogus": 1}, "s.bogus"),
             ({"n": 1, "pair": [1]}, "s.pair"), ({"n": 1, "names": [1]}, "s.names[0]"),
             ({"n": 1, "src": "missing"}, "s.src"), ({"n": 1, "maybe": "a"}, "s.maybe")]
    for raw, key in cases:
        with pytest.raises(ConfigError) as exc:
            bind(Demo, {"s": raw}, "s", tmp_path)
        assert exc.value.key == key


def test_overrides_and_documents(tmp_path):
    doc = apply_overrides({"a": {"x": 1}}, ["a.x=2.5", "b.y=[1, 2]", "b.z=plain"])
    assert doc == {"a": {"x": 2.5}, "b": {"y": [1, 2], "z": "plain"}}
    for bad in ["a.x", "ax=1", "a.b.c=1"]:
        with pytest.raises(ConfigError):
            apply_overrides({}, [bad])
    (tmp_path / "c.toml").write_text("[run]\nseed = 3\n")
    assert read_document(tmp_path / "c.toml")["run"] == {"seed": 3}
    (tmp_path / "bad.toml").write_text("[run\n")
    with pytest.raises(ConfigError, match="invalid TOML"):
        read_document(tmp_path / "bad.toml")
    with pytest.raises(ConfigError, match="not found"):
        read_document(tmp_path / "none.toml")
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("MORPHASSIM_THREADS", raising=False)
    assert resolve_threads(None, RunSection()) == 1
    monkeypatch.setenv("MORPHASSIM_THREADS", "3")
    assert resolve_threads(None, RunSection()) == 3
    assert resolve_threads(None, RunSection(threads=2)) == 2
    assert resolve_threads(4, RunSection(threads=2)) == 4
    assert resolve_threads(4, RunSection(deterministic=True)) == 1
    monkeypatch.setenv("MORPHASSIM_THREADS", "x")
    with pytest.raises(ConfigError):
        resolve_threads(None, RunSection())
