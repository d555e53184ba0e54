import numpy as np
import pytest

from fedssl.errors import ContractError, FormatError
from fedssl.snapshot import (MAGIC, ModelSnapshot, ROLE_CLASSIFIER, ROLE_SSL,
                             load_snapshot, save_snapshot)


def make_snapshot(role=ROLE_SSL):
    g = np.random.Generator(np.random.PCG64(7))
    tail = ("head.weight", "head.bias") if role == ROLE_CLASSIFIER else \
        ("proj.weight", "proj.bias")
    params = (
        ("block1.conv.weight", g.normal(size=(4, 3, 3, 3))),
        ("block1.conv.bias", np.zeros(4)),
        (tail[0], g.normal(size=(4, 2))),
        (tail[1], np.zeros(2)),
    )
    return ModelSnapshot(params, role)


class TestModelSnapshot:
    def test_duplicate_names_rejected(self):
        with pytest.raises(ContractError, match="duplicate"):
            ModelSnapshot((("a", np.zeros(1)), ("a", np.ones(1))), ROLE_SSL)

    def test_unknown_role_rejected(self):
        with pytest.raises(ContractError):
            ModelSnapshot((("a", np.zeros(1)),), "projector")

    def test_arrays_immutable(self):
        snap = make_snapshot()
        with pytest.raises(ValueError):
            snap.params[0][1][0, 0, 0, 0] = 99.0

    def test_to_tensors_gives_writable_copies(self):
        snap = make_snapshot()
        tensors = snap.to_tensors()
        tensors[0].data[0, 0, 0, 0] = 42.0
        assert snap.params[0][1][0, 0, 0, 0] != 42.0
        assert [t.name for t in tensors] == snap.names()


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        snap = make_snapshot()
        path = tmp_path / "model.fssl"
        save_snapshot(snap, path)
        back = load_snapshot(path)
        assert back.role == ROLE_SSL
        assert back.names() == snap.names()
        for (_, a), (_, b) in zip(snap.params, back.params):
            assert a.shape == b.shape
            assert a.tobytes() == b.tobytes()

    def test_classifier_role_recovered(self, tmp_path):
        path = tmp_path / "clf.fssl"
        save_snapshot(make_snapshot(ROLE_CLASSIFIER), path)
        assert load_snapshot(path).role == ROLE_CLASSIFIER

    def test_magic_written(self, tmp_path):
        path = tmp_path / "m.fssl"
        save_snapshot(make_snapshot(), path)
        assert path.read_bytes()[:5] == MAGIC

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / "bad.fssl"
        path.write_bytes(b"NOTIT" + b"\x00" * 16)
        with pytest.raises(FormatError) as err:
            load_snapshot(path)
        assert err.value.offset == 0

    def test_truncation_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.fssl"
        save_snapshot(make_snapshot(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 9])
        with pytest.raises(FormatError) as err:
            load_snapshot(path)
        assert err.value.offset is not None and err.value.offset > 0

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "extra.fssl"
        save_snapshot(make_snapshot(), path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            load_snapshot(path)
