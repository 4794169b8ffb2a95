import numpy as np
import pytest

from conftest import TINY_STUDENT, TINY_TEACHER, tiny_model
from evc.checkpoint import (
    load_bank,
    load_checkpoint,
    model_from_bytes,
    model_to_bytes,
    save_bank,
    save_checkpoint,
)
from evc.errors import DecodeError
from evc.model import build_encoder


class TestModelBytes:
    def test_roundtrip_keeps_structure_and_weights(self):
        model = tiny_model(enc=TINY_STUDENT)
        back = model_from_bytes(model_to_bytes(model))
        assert back.enc_scheme == TINY_STUDENT
        assert back.dec_scheme == TINY_TEACHER
        assert back.num_stages == 2
        assert back.quant.num_rates == 2
        for (na, pa), (nb, pb) in zip(model.named_parameters(), back.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pb.data, pa.data.astype(np.float32))

    def test_float32_bytes_are_stable(self):
        data = model_to_bytes(tiny_model(dtype=np.float32))
        assert model_to_bytes(model_from_bytes(data)) == data

    def test_bad_magic(self):
        data = model_to_bytes(tiny_model())
        with pytest.raises(DecodeError, match="magic"):
            model_from_bytes(b"NOPE" + data[4:])

    def test_truncated(self):
        data = model_to_bytes(tiny_model())
        with pytest.raises(DecodeError, match="truncated"):
            model_from_bytes(data[:-5])

    def test_trailing_bytes(self):
        data = model_to_bytes(tiny_model())
        with pytest.raises(DecodeError, match="trailing"):
            model_from_bytes(data + b"\x00\x00")


class TestFiles:
    def test_save_and_load(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        path = tmp_path / "ckpt" / "model.evck"
        save_checkpoint(path, model)
        back = load_checkpoint(path)
        for (_, pa), (_, pb) in zip(model.named_parameters(), back.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nothing.evck")

    def test_bank_roundtrip(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        encoders = [build_encoder(TINY_STUDENT, 4, num_stages=2, seed=s) for s in (1, 2)]
        provenance = [{"seed": 1, "regime": "separate"}, {"seed": 2, "regime": "separate"}]
        path = tmp_path / "bank.evckb"
        save_bank(path, model, encoders, provenance)
        shared, loaded, tags = load_bank(path)
        assert tags == provenance
        assert len(loaded) == 2
        for orig, back in zip(encoders, loaded):
            assert back.scheme == TINY_STUDENT
            for (_, pa), (_, pb) in zip(orig.named_parameters(), back.named_parameters()):
                np.testing.assert_array_equal(pa.data, pb.data)
        np.testing.assert_array_equal(shared.quant.log_global.data, model.quant.log_global.data)
