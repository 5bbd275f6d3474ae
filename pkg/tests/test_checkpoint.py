import numpy as np
import pytest

from dfpir import tensor as T
from dfpir.checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from dfpir.model import DFPIR
from dfpir.optim import OptimState, adam_step
from dfpir.prompts import PromptTable
from dfpir.tensor import Tensor


@pytest.fixture
def image(rng):
    return Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))


def forward(model, image, task="derain"):
    with T.no_grad():
        return model(image, task).data


class TestRoundTrip:
    def test_forward_bit_exact(self, tiny_model, image, tmp_path):
        save_checkpoint(tmp_path / "m.dfpc", tiny_model, meta={"note": "x"})
        model, optim, meta = load_checkpoint(tmp_path / "m.dfpc")
        assert optim is None and meta == {"note": "x"}
        for task in tiny_model.registry.names:
            assert np.array_equal(forward(model, image, task), forward(tiny_model, image, task))

    def test_optimizer_state(self, tiny_model, tmp_path):
        params = tiny_model.parameters()
        state = OptimState.for_params(params, lr=3e-4)
        adam_step(params, [np.ones_like(p.data) for p in params], state)
        model, optim, _ = decode_checkpoint(encode_checkpoint(tiny_model, state))
        assert optim.step == 1 and optim.lr == 3e-4
        for a, b in zip(optim.m + optim.v, state.m + state.v):
            assert np.array_equal(a, b)

    def test_file_prompts_survive(self, tiny_config, image, rng):
        vectors = {t: rng.normal(tiny_config.prompt_dim).astype(np.float32) for t in tiny_config.tasks}
        model = DFPIR(tiny_config, PromptTable(model_registry(tiny_config), vectors, "file"))
        back, _, _ = decode_checkpoint(encode_checkpoint(model))
        assert back.prompts.source == "file"
        assert np.array_equal(forward(back, image), forward(model, image))

    def test_float64_model(self, tiny_config, tmp_path):
        model = DFPIR(tiny_config, dtype=np.float64)
        back, _, _ = decode_checkpoint(encode_checkpoint(model))
        assert back.patch_embed.weight.dtype == np.float64

    def test_encoding_is_deterministic(self, tiny_model):
        assert encode_checkpoint(tiny_model) == encode_checkpoint(tiny_model)


def model_registry(cfg):
    from dfpir.prompts import TaskRegistry

    return TaskRegistry(cfg.tasks)


class TestCorruption:
    def test_flipped_byte(self, tiny_model):
        buf = bytearray(encode_checkpoint(tiny_model))
        buf[len(buf) // 2] ^= 0x40
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(buf))

    @pytest.mark.parametrize("keep", [0, 3, 10, 200])
    def test_truncated(self, tiny_model, keep):
        with pytest.raises(CheckpointError):
            decode_checkpoint(encode_checkpoint(tiny_model)[:keep])

    def test_bad_magic(self, tiny_model):
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"XXXX" + encode_checkpoint(tiny_model)[4:])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.dfpc")

    def test_atomic_write_leaves_no_temp(self, tiny_model, tmp_path):
        save_checkpoint(tmp_path / "m.dfpc", tiny_model)
        assert [p.name for p in tmp_path.iterdir()] == ["m.dfpc"]
