import numpy as np
import pytest

from dfpir import tensor as T
from dfpir.data import DatasetSpec, make_batch
from dfpir.model import DFPIR, LEVELS, ModelConfig, restore
from dfpir.optim import OptimState, adam_step
from dfpir.prompts import UnknownTaskError
from dfpir.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def desk_model():
    return DFPIR(ModelConfig(tasks=("noise25", "derain", "dehaze")))


class TestConfig:
    @pytest.mark.parametrize("bad", [
        {"channels": 3}, {"blocks": (1, 1, 1)}, {"heads": (1, 1, 3, 1)}, {"gamma": 0.0},
        {"mask_axis": "diag"}, {"mask_mode": "hard"}, {"components": "both"}, {"tasks": ("a", "a")},
        {"prompt_dim": 0}, {"ffn_expansion": 0.0},
    ])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_dict_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            ModelConfig.from_dict({"widht": 8})


class TestShapes:
    def test_desk_forward(self, desk_model, rng):
        x = Tensor(rng.random((2, 3, 64, 64)).astype(np.float32))
        with T.no_grad():
            out = desk_model(x, ["noise25", "dehaze"])
        assert out.shape == (2, 3, 64, 64)
        widths = [f.shape[1] for f in desk_model.trace["dgpb_out"]]
        assert widths == [16, 32, 64, 128]
        sizes = [f.shape[2] for f in desk_model.trace["dgpb_out"]]
        assert sizes == [64, 32, 16, 8]

    def test_refined_features_are_twice_as_wide(self, tiny_model, rng):
        x = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
        p = tiny_model.prompt_batch(["derain"])
        with T.no_grad():
            fr = tiny_model.decode(tiny_model.apply_dgpbs(tiny_model.encode(tiny_model.shallow_extract(x)), p))
        assert fr.shape == (1, 8, 16, 16)

    @pytest.mark.parametrize("hw", [(12, 16), (16, 20), (7, 8)])
    def test_size_not_divisible_by_8(self, tiny_model, hw):
        with pytest.raises(ShapeError):
            tiny_model(Tensor(np.zeros((1, 3) + hw, np.float32)), "derain")

    def test_wrong_channel_count(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model(Tensor(np.zeros((1, 1, 16, 16), np.float32)), "derain")

    def test_task_count_mismatch(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model(Tensor(np.zeros((2, 3, 16, 16), np.float32)), ["derain"])

    def test_unknown_task(self, tiny_model):
        with pytest.raises(UnknownTaskError):
            tiny_model(Tensor(np.zeros((1, 3, 16, 16), np.float32)), "snow")


class TestBehaviour:
    def test_identity_init_is_exact(self, tiny_config, rng):
        tiny_config.identity_init = True
        model = DFPIR(tiny_config)
        x = rng.random((1, 3, 16, 16)).astype(np.float32)
        with T.no_grad():
            out = model(Tensor(x), "dehaze").data
        assert np.array_equal(out, x)

    def test_distinct_permutations_per_level(self, tiny_model):
        for lvl in range(LEVELS):
            perms = tiny_model.task_permutations(lvl)
            assert len({p.tobytes() for p in perms.values()}) == len(perms)
            for p in perms.values():
                assert sorted(p.tolist()) == list(range(2 * (4 << lvl)))

    def test_tasks_change_output(self, tiny_model, rng):
        x = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
        with T.no_grad():
            a = tiny_model(x, "noise25").data
            b = tiny_model(x, "derain").data
        assert not np.array_equal(a, b)

    def test_same_seed_same_weights(self, tiny_config):
        a, b = DFPIR(tiny_config), DFPIR(tiny_config)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(p.data, q.data)

    def test_restore_clamps(self, tiny_model):
        out = restore(tiny_model, np.full((1, 3, 16, 16), 2.0), "derain")
        assert out.max() <= 1.0 and out.min() >= 0.0

    def test_backward_reaches_every_weight_but_dgm(self, tiny_model, rng):
        x = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
        T.l1_loss(tiny_model(x, "derain"), Tensor(np.zeros_like(x.data))).backward()
        missing = [n for n, p in tiny_model.named_parameters() if p.grad is None]
        assert missing and all(".dgm." in n for n in missing)

    def test_two_task_training_reduces_loss(self):
        tasks = ("noise25", "dehaze")
        model = DFPIR(ModelConfig(channels=4, blocks=(1, 1, 1, 1), prompt_dim=8, tasks=tasks))
        spec = DatasetSpec(tasks=tasks, patch=16, samples_per_epoch=400, seed=0)
        clean_h, degraded_h, names_h = make_batch(spec, 10_000, 8)

        def held_out():
            with T.no_grad():
                return T.l1_loss(model(Tensor(degraded_h), names_h), Tensor(clean_h)).item()

        params = model.parameters()
        state = OptimState.for_params(params, lr=1e-3)
        before = held_out()
        for step in range(200):
            clean, degraded, names = make_batch(spec, step, 2)
            T.l1_loss(model(Tensor(degraded), names), Tensor(clean)).backward()
            adam_step(params, [p.grad for p in params], state)
            for p in params:
                p.grad = None
        assert held_out() < 0.8 * before
