import numpy as np
import pytest
import torch

from incproto.bundle import build_bundle, load_checkpoint, save_checkpoint
from incproto.config import ModelConfig
from incproto.errors import ConfigError


def conv_config(**kw):
    defaults = dict(backbone="conv", d=8, conv_channels=[4, 4, 8],
                    rm_hidden=[16, 8], dropout=0.2, dtype="float32")
    defaults.update(kw)
    return ModelConfig(**defaults)


class TestBuildBundle:
    def test_same_seed_same_weights(self):
        ids = [f"c{i}" for i in range(5)]
        a = build_bundle(conv_config(), ids, seed=3)
        b = build_bundle(conv_config(), ids, seed=3)
        assert a.digests() == b.digests()
        assert torch.equal(a.prototypes.rows, b.prototypes.rows)

    def test_different_seed_different_weights(self):
        ids = [f"c{i}" for i in range(5)]
        a = build_bundle(conv_config(), ids, seed=3)
        b = build_bundle(conv_config(), ids, seed=4)
        assert a.digests() != b.digests()

    def test_float64_propagates(self):
        bundle = build_bundle(conv_config(dtype="float64"), ["a", "b"], seed=0)
        assert bundle.dtype == torch.float64
        assert bundle.prototypes.rows.dtype == torch.float64
        for module in bundle.modules().values():
            for p in module.parameters():
                assert p.dtype == torch.float64

    def test_identity_backbone(self):
        config = ModelConfig(backbone="identity", d=6, rm_hidden=[8, 4])
        bundle = build_bundle(config, ["a"], seed=0)
        x = torch.randn(3, 6)
        assert torch.equal(bundle.backbone(x), x)

    def test_trainable_parameters_include_prototypes(self):
        bundle = build_bundle(conv_config(), ["a", "b"], seed=0)
        params = list(bundle.trainable_parameters())
        assert any(p is bundle.prototypes.rows for p in params)


class TestCheckpointRoundTrip:
    def test_round_trip_preserves_everything(self, tmp_path):
        ids = [f"c{i}" for i in range(4)]
        bundle = build_bundle(conv_config(), ids, seed=1, feature_fingerprint="fp123")
        path = tmp_path / "ck.pt"
        save_checkpoint(bundle, path, config_snapshot={"k": "v"}, seed=1)
        loaded, config, seed = load_checkpoint(path)
        assert loaded.digests() == bundle.digests()
        assert torch.equal(loaded.prototypes.rows, bundle.prototypes.rows.detach())
        assert loaded.prototypes.registry == bundle.prototypes.registry
        assert loaded.prototypes.learnable
        assert loaded.feature_fingerprint == "fp123"
        assert config == {"k": "v"}
        assert seed == 1

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        ids = ["a", "b", "c"]
        p1, p2 = tmp_path / "a.pt", tmp_path / "b.pt"
        save_checkpoint(build_bundle(conv_config(), ids, seed=9), p1,
                        config_snapshot={"x": 1}, seed=9)
        save_checkpoint(build_bundle(conv_config(), ids, seed=9), p2,
                        config_snapshot={"x": 1}, seed=9)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.pt"
        torch.save({"something": 1}, path)
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_loaded_model_runs(self, tmp_path):
        bundle = build_bundle(conv_config(), ["a", "b"], seed=2)
        path = tmp_path / "ck.pt"
        save_checkpoint(bundle, path)
        loaded, _, _ = load_checkpoint(path)
        x = torch.randn(2, 16, 8)
        loaded.train_mode(False)
        bundle.train_mode(False)
        with torch.no_grad():
            assert torch.equal(loaded.backbone(x), bundle.backbone(x))
