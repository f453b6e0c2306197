import pytest

from soundpatch.config import RunConfig


def test_yaml_roundtrip(tmp_path):
    cfg = RunConfig()
    cfg.diffusion.train_steps = 1234
    cfg.data.n_train = 99
    path = tmp_path / "cfg.yaml"
    cfg.save(path)
    back = RunConfig.load(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.config_hash() == cfg.config_hash()


def test_overrides_with_type_coercion():
    cfg = RunConfig()
    cfg.apply_overrides(["diffusion.lr=3e-4", "data.n_train=64", "seed=9",
                         "diffusion.freeze_denoiser=true",
                         "diffusion.attention_variant=additive"])
    assert cfg.diffusion.lr == pytest.approx(3e-4)
    assert cfg.data.n_train == 64 and isinstance(cfg.data.n_train, int)
    assert cfg.seed == 9
    assert cfg.diffusion.freeze_denoiser is True
    assert cfg.diffusion.attention_variant == "additive"


def test_unknown_override_path():
    cfg = RunConfig()
    with pytest.raises(KeyError):
        cfg.apply_overrides(["diffusion.nope=1"])
    with pytest.raises(KeyError):
        cfg.apply_overrides(["nosection.x=1"])
    with pytest.raises(ValueError):
        cfg.apply_overrides(["missing-equals"])


def test_hash_changes_with_content():
    a = RunConfig()
    b = RunConfig()
    b.diffusion.guidance = 3.0
    assert a.config_hash() != b.config_hash()


def test_derived_fields():
    cfg = RunConfig()
    assert cfg.data.n_patches == 16
    assert cfg.data.patch_pixels == 16
    assert cfg.data.clip_samples == 16640
