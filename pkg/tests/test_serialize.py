import numpy as np
import pytest

from adapterleak.craft import CraftConfig, craft_backbone
from adapterleak.errors import FormatError
from adapterleak.grad import AdapterGradients
from adapterleak.model import AdapterSet, ModelConfig
from adapterleak.numerics import Rng
from adapterleak.serialize import (read_adapters, read_backbone, read_gradients,
                                   write_adapters, write_backbone, write_gradients)


def test_backbone_round_trip(tmp_path):
    cfg = ModelConfig()
    bb, _ = craft_backbone(CraftConfig(seed=7), cfg)
    path = tmp_path / "bb.plta"
    write_backbone(bb, path)
    again = read_backbone(path)
    assert np.array_equal(again.embed, bb.embed)
    assert np.array_equal(again.pos, bb.pos)
    assert len(again.encoders) == len(bb.encoders)
    assert np.array_equal(again.encoders[3].w_mlp1, bb.encoders[3].w_mlp1)
    assert np.array_equal(again.w_cls, bb.w_cls)


def test_adapters_round_trip(tmp_path):
    cfg = ModelConfig(D=16, L=2, num_encoders=2, P=4, C=3, H=8, W=8, r=4,
                      num_classes=5)
    ads = AdapterSet.random(cfg, Rng(3), scale=0.3)
    path = tmp_path / "ads.plta"
    write_adapters(ads, path)
    again = read_adapters(path)
    assert len(again) == len(ads)
    for a, b in zip(ads, again):
        assert np.array_equal(a.w_down, b.w_down)
        assert np.array_equal(a.b_up, b.b_up)


def test_gradients_round_trip(tmp_path):
    cfg = ModelConfig(D=16, L=2, num_encoders=2, P=4, C=3, H=8, W=8, r=4,
                      num_classes=5)
    g = AdapterGradients.zeros(cfg)
    g.w_down += Rng(4).normal(0, 1e-10, g.w_down.size).reshape(g.w_down.shape)
    path = tmp_path / "g.plta"
    write_gradients(g, 7, path)
    again, m = read_gradients(path)
    assert m == 7
    assert np.array_equal(again.w_down.view(np.uint64), g.w_down.view(np.uint64))


def test_missing_entry_rejected(tmp_path):
    from adapterleak.dataio import write_tensor_archive

    path = tmp_path / "bad.plta"
    write_tensor_archive({"w_down": np.zeros((1, 2, 3))}, path)
    with pytest.raises(FormatError):
        read_gradients(path)
