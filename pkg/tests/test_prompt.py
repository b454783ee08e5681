"""Soft-prompt initialization, transfer copies and the prompt file format."""

import struct

import numpy as np
import pytest

from pandalab.backbone import BackboneConfig
from pandalab.prompt import (INPUT_CONCAT, PREFIX, PROMPT_VERSION, InitMode, Origin, PromptLayout,
                             SoftPrompt, clone_for_transfer, init_prompt, load_prompt, save_prompt)

CFG = BackboneConfig()
CONCAT = PromptLayout.for_backbone(CFG, INPUT_CONCAT)
PFX = PromptLayout.for_backbone(CFG, PREFIX)


class TestInit:
    def test_constant_zero(self):
        p = init_prompt(InitMode.constant(0.0), CONCAT, seed=1)
        assert not p.params.any() and p.origin == Origin("random")

    def test_normal_reproducible(self):
        a = init_prompt(InitMode.normal(0.02), PFX, seed=7)
        b = init_prompt(InitMode.normal(0.02), PFX, seed=7)
        assert np.array_equal(a.params, b.params)
        assert not np.array_equal(a.params, init_prompt(InitMode.normal(0.02), PFX, seed=8).params)

    def test_shapes(self):
        assert init_prompt(InitMode(), CONCAT, 0).params.shape == (20, 32)
        assert init_prompt(InitMode(), PFX, 0, prompt_len=5).params.shape == (2, 2, 5, 32)

    @pytest.mark.parametrize("seed", range(5))
    def test_sparse_density(self, seed):
        layout = PromptLayout(INPUT_CONCAT, 100)
        p = init_prompt(InitMode.sparse(density=0.1, std=0.02), layout, seed, prompt_len=100)
        assert abs(np.count_nonzero(p.params) / p.params.size - 0.1) < 0.02

    def test_normal_std(self):
        p = init_prompt(InitMode.normal(0.02), PromptLayout(INPUT_CONCAT, 100), 0, prompt_len=100)
        assert abs(p.params.std() - 0.02) < 0.001

    @pytest.mark.parametrize("kw", [{"kind": "sparse", "density": 0.0}, {"kind": "sparse", "density": 1.5},
                                    {"kind": "normal", "std": 0.0}, {"kind": "laplace"}])
    def test_invalid_modes(self, kw):
        with pytest.raises(ValueError):
            InitMode(**kw)

    def test_prompt_len_positive(self):
        with pytest.raises(ValueError):
            init_prompt(InitMode(), CONCAT, 0, prompt_len=0)

    def test_non_finite_params(self):
        with pytest.raises(ValueError, match="finite"):
            SoftPrompt(CONCAT, np.full((2, 32), np.nan))


class TestClone:
    def test_bit_identical_and_tagged(self):
        src = init_prompt(InitMode(), PFX, 3)
        src.task_id = "S0"
        c = clone_for_transfer(src)
        assert np.array_equal(c.params, src.params)
        assert c.origin == Origin("transferred", "S0")

    def test_no_aliasing(self):
        src = init_prompt(InitMode(), CONCAT, 3)
        before = src.params.copy()
        c = clone_for_transfer(src)
        c.params += 1.0
        assert np.array_equal(src.params, before)

    def test_layout_mismatch(self):
        src = init_prompt(InitMode(), CONCAT, 3)
        with pytest.raises(ValueError):
            clone_for_transfer(src, PromptLayout(INPUT_CONCAT, 64))

    def test_origin_is_frozen(self):
        with pytest.raises(AttributeError):
            Origin("random").kind = "transferred"


class TestFile:
    @pytest.mark.parametrize("layout", [CONCAT, PFX])
    def test_round_trip(self, tmp_path, layout):
        p = init_prompt(InitMode.normal(0.7), layout, 11, prompt_len=6)
        p.origin, p.task_id = Origin("target_like", "src-task"), "tgt"
        path = tmp_path / "p.prm"
        save_prompt(p, path)
        back = load_prompt(path)
        assert np.array_equal(back.params, p.params) and back.params.dtype == np.float64
        assert back.layout == p.layout and back.origin == p.origin and back.task_id == "tgt"

    def test_round_trip_without_metadata(self, tmp_path):
        p = init_prompt(InitMode(), CONCAT, 0, prompt_len=2)
        save_prompt(p, tmp_path / "p.prm")
        back = load_prompt(tmp_path / "p.prm")
        assert back.origin == Origin() and back.task_id is None

    def test_header(self, tmp_path):
        save_prompt(init_prompt(InitMode(), PFX, 0, prompt_len=3), tmp_path / "p.prm")
        blob = (tmp_path / "p.prm").read_bytes()
        assert blob[:8] == b"PANDAPRM"
        assert struct.unpack_from("<H", blob, 8)[0] == PROMPT_VERSION

    def test_truncated(self, tmp_path):
        save_prompt(init_prompt(InitMode(), PFX, 0), tmp_path / "p.prm")
        blob = (tmp_path / "p.prm").read_bytes()
        for cut in (4, 12, len(blob) // 2, len(blob) - 1):
            (tmp_path / "t.prm").write_bytes(blob[:cut])
            with pytest.raises(ValueError):
                load_prompt(tmp_path / "t.prm")

    def test_bad_magic(self, tmp_path):
        save_prompt(init_prompt(InitMode(), PFX, 0), tmp_path / "p.prm")
        blob = bytearray((tmp_path / "p.prm").read_bytes())
        blob[0:1] = b"X"
        (tmp_path / "p.prm").write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="magic"):
            load_prompt(tmp_path / "p.prm")

    def test_version_mismatch_names_both(self, tmp_path):
        save_prompt(init_prompt(InitMode(), PFX, 0), tmp_path / "p.prm")
        blob = bytearray((tmp_path / "p.prm").read_bytes())
        blob[8:10] = (9).to_bytes(2, "little")
        (tmp_path / "p.prm").write_bytes(bytes(blob))
        with pytest.raises(ValueError) as err:
            load_prompt(tmp_path / "p.prm")
        assert "9" in str(err.value) and str(PROMPT_VERSION) in str(err.value)
