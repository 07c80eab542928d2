"""Archive layouts for backbones, adapter sets, and gradient observations.

Everything rides on the named-tensor archive format from dataio; entry
names are stable so archives written by one command are readable by the
others.
"""

from __future__ import annotations

import numpy as np

from .dataio import read_tensor_archive, write_tensor_archive
from .errors import FormatError
from .grad import AdapterGradients
from .model import Adapter, AdapterSet, EncoderParams, FrozenBackbone

_ENC_FIELDS = ("ln1_w", "ln1_b", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
               "w_msa", "ln2_w", "ln2_b", "w_mlp1", "b_mlp1", "w_mlp2", "b_mlp2")


def write_backbone(backbone: FrozenBackbone, path) -> None:
    tensors = {
        "embed": backbone.embed,
        "class_token": backbone.class_token,
        "pos": backbone.pos,
        "ln_f_w": backbone.ln_f_w,
        "ln_f_b": backbone.ln_f_b,
        "w_cls": backbone.w_cls,
        "b_cls": backbone.b_cls,
        "num_encoders": np.array(float(len(backbone.encoders))),
    }
    for i, enc in enumerate(backbone.encoders):
        for name in _ENC_FIELDS:
            tensors[f"enc{i}_{name}"] = getattr(enc, name)
    write_tensor_archive(tensors, path)


def read_backbone(path) -> FrozenBackbone:
    t = read_tensor_archive(path)
    try:
        n_enc = int(t["num_encoders"])
        encoders = [
            EncoderParams(**{name: t[f"enc{i}_{name}"] for name in _ENC_FIELDS})
            for i in range(n_enc)
        ]
        return FrozenBackbone(
            embed=t["embed"], class_token=t["class_token"], pos=t["pos"],
            encoders=encoders, ln_f_w=t["ln_f_w"], ln_f_b=t["ln_f_b"],
            w_cls=t["w_cls"], b_cls=t["b_cls"],
        )
    except KeyError as exc:
        raise FormatError(f"backbone archive missing entry {exc}") from exc


def write_adapters(adapters: AdapterSet, path) -> None:
    write_tensor_archive({
        "w_down": np.stack([a.w_down for a in adapters]),
        "b_down": np.stack([a.b_down for a in adapters]),
        "w_up": np.stack([a.w_up for a in adapters]),
        "b_up": np.stack([a.b_up for a in adapters]),
    }, path)


def read_adapters(path) -> AdapterSet:
    t = read_tensor_archive(path)
    try:
        return AdapterSet([
            Adapter(t["w_down"][i], t["b_down"][i], t["w_up"][i], t["b_up"][i])
            for i in range(t["w_down"].shape[0])
        ])
    except KeyError as exc:
        raise FormatError(f"adapter archive missing entry {exc}") from exc


def write_gradients(grads: AdapterGradients, batch_size: int, path) -> None:
    write_tensor_archive({
        "w_down": grads.w_down,
        "b_down": grads.b_down,
        "w_up": grads.w_up,
        "b_up": grads.b_up,
        "batch_size": np.array(float(batch_size)),
    }, path)


def read_gradients(path) -> tuple[AdapterGradients, int]:
    t = read_tensor_archive(path)
    try:
        grads = AdapterGradients(t["w_down"], t["b_down"], t["w_up"], t["b_up"])
        return grads, int(t["batch_size"])
    except KeyError as exc:
        raise FormatError(f"gradient archive missing entry {exc}") from exc
