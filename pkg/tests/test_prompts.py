import math

import numpy as np
import pytest

from dfpir.prompts import (DEFAULT_TASKS, DGM, PromptTable, TaskRegistry, UnknownTaskError,
                           read_prompt_file, write_prompt_file)
from dfpir.tensor import Tensor


@pytest.fixture
def registry():
    return TaskRegistry(DEFAULT_TASKS)


class TestRegistry:
    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            TaskRegistry(["derain", "derain"])

    def test_unknown_task(self, registry):
        with pytest.raises(UnknownTaskError):
            registry.index("snow")


class TestPromptTable:
    def test_lookup_is_deterministic(self, registry):
        a = PromptTable.seeded(registry, 16, 0)
        b = PromptTable.seeded(registry, 16, 0)
        assert np.array_equal(a.lookup("derain"), b.lookup("derain"))
        assert np.array_equal(a.lookup("derain"), a.lookup("derain"))

    def test_tasks_differ(self, registry):
        table = PromptTable.seeded(registry, 16, 0)
        vecs = [table.lookup(t).tobytes() for t in registry]
        assert len(set(vecs)) == len(vecs)

    def test_seed_changes_table(self, registry):
        a = PromptTable.seeded(registry, 8, 0).lookup("dehaze")
        b = PromptTable.seeded(registry, 8, 1).lookup("dehaze")
        assert not np.array_equal(a, b)

    def test_unknown_lookup(self, registry):
        with pytest.raises(UnknownTaskError):
            PromptTable.seeded(registry, 4, 0).lookup("snow")

    def test_file_round_trip(self, registry, tmp_path, rng):
        vectors = {t: rng.normal(12).astype(np.float32) for t in registry}
        path = tmp_path / "prompts.dfpe"
        write_prompt_file(path, vectors)
        table = PromptTable.from_file(path, registry)
        for t in registry:
            assert np.array_equal(table.lookup(t), vectors[t])
        assert table.source == "file"

    def test_file_missing_task(self, tmp_path):
        path = tmp_path / "p.dfpe"
        write_prompt_file(path, {"derain": np.ones(3)})
        with pytest.raises(UnknownTaskError):
            PromptTable.from_file(path, TaskRegistry(["derain", "dehaze"]))

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "p.dfpe"
        write_prompt_file(path, {"derain": np.ones(3)})
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(ValueError):
            read_prompt_file(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.dfpe"
        path.write_bytes(b"NOPE")
        with pytest.raises(ValueError):
            read_prompt_file(path)


class TestDGM:
    def test_zero_weights(self, init64):
        m = DGM(init64, 6, 8)
        for p in m.parameters():
            p.data[...] = 0
        assert not m(Tensor(np.ones((1, 6)))).data.any()

    def test_identity_path(self, init64):
        m = DGM(init64, 2, 2)
        m.fc1.weight.data[...] = np.eye(2)
        m.fc2.weight.data[...] = np.eye(2)
        p = [0.5, -1.0]
        want = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in p]
        np.testing.assert_allclose(m(Tensor(np.array(p))).data[0], want, atol=1e-12)

    def test_output_length(self, init64):
        for c in (4, 8, 16, 32):
            assert DGM(init64, 5, 2 * c)(Tensor(np.ones(5))).shape == (1, 2 * c)

    def test_dim_mismatch(self, init64):
        with pytest.raises(ValueError):
            DGM(init64, 5, 4)(Tensor(np.ones((1, 6))))
