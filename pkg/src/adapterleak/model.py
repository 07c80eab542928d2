"""Fixed ViT-with-adapters architecture and its forward pass.

Encoder sublayer pattern, repeated twice per encoder (attention then MLP):

    u -> LN -> core (MSA or MLP) -> adapter -> (+ u)

The adapter carries an internal skip connection; the outer residual is taken
from the LayerNorm input. The head consumes the final LayerNorm output,
either mean-pooled over all tokens or from the class token alone.

The forward pass records a cache that supports the hand-written backward
pass in :mod:`adapterleak.grad` and exact suffix re-evaluation (rerunning
from any adapter with modified parameters), which the finite-difference
harness relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import Batch
from .errors import ConfigError, ShapeError
from .numerics import Rng, as_f64, gelu, relu, softmax_rows

LN_EPS = 0.0  # crafted designs rely on pure population statistics


@dataclass
class ModelConfig:
    D: int = 96
    L: int = 4
    num_encoders: int = 6
    P: int = 4
    C: int = 3
    H: int = 8
    W: int = 8
    r: int = 8
    num_classes: int = 10
    adapter_activation: str = "relu"
    head_mode: str = "mean_pool"

    def __post_init__(self):
        if self.D % self.L:
            raise ConfigError(f"D={self.D} not divisible by L={self.L}")
        if self.H % self.P or self.W % self.P:
            raise ConfigError(f"image {self.H}x{self.W} not divisible by P={self.P}")
        if self.r < 2:
            raise ConfigError(f"adapter bottleneck r={self.r} must be >= 2")
        if self.N < 1:
            raise ConfigError("need at least one patch")
        if self.adapter_activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown adapter activation {self.adapter_activation!r}")
        if self.head_mode not in ("mean_pool", "class_token"):
            raise ConfigError(f"unknown head mode {self.head_mode!r}")

    @property
    def D_h(self) -> int:
        return self.D // self.L

    @property
    def N(self) -> int:
        return (self.H // self.P) * (self.W // self.P)

    @property
    def patch_dim(self) -> int:
        return self.P * self.P * self.C

    @property
    def num_adapters(self) -> int:
        return 2 * self.num_encoders


@dataclass
class EncoderParams:
    ln1_w: np.ndarray
    ln1_b: np.ndarray
    w_q: np.ndarray  # (L, D_h, D_h)
    b_q: np.ndarray  # (L, D_h)
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray  # (L, D_h, D)
    b_v: np.ndarray  # (L, D_h)
    w_msa: np.ndarray  # (D, D)
    ln2_w: np.ndarray
    ln2_b: np.ndarray
    w_mlp1: np.ndarray  # (4D, D)
    b_mlp1: np.ndarray
    w_mlp2: np.ndarray  # (D, 4D)
    b_mlp2: np.ndarray


@dataclass
class FrozenBackbone:
    embed: np.ndarray  # (D, P^2 C)
    class_token: np.ndarray  # (D,)
    pos: np.ndarray  # (N+1, D)
    encoders: list[EncoderParams]
    ln_f_w: np.ndarray
    ln_f_b: np.ndarray
    w_cls: np.ndarray  # (num_classes, D)
    b_cls: np.ndarray


@dataclass
class Adapter:
    w_down: np.ndarray  # (r, D)
    b_down: np.ndarray  # (r,)
    w_up: np.ndarray  # (D, r)
    b_up: np.ndarray  # (D,)


class AdapterSet:
    """The only trainable parameters: one down/up pair per inserted adapter."""

    def __init__(self, adapters: list[Adapter]):
        self.adapters = adapters

    def __len__(self):
        return len(self.adapters)

    def __getitem__(self, i) -> Adapter:
        return self.adapters[i]

    def __iter__(self):
        return iter(self.adapters)

    def copy(self) -> "AdapterSet":
        return AdapterSet([
            Adapter(a.w_down.copy(), a.b_down.copy(), a.w_up.copy(), a.b_up.copy())
            for a in self.adapters
        ])

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "AdapterSet":
        return cls([
            Adapter(np.zeros((cfg.r, cfg.D)), np.zeros(cfg.r),
                    np.zeros((cfg.D, cfg.r)), np.zeros(cfg.D))
            for _ in range(cfg.num_adapters)
        ])

    @classmethod
    def random(cls, cfg: ModelConfig, rng: Rng, scale: float = 0.1) -> "AdapterSet":
        adapters = []
        for _ in range(cfg.num_adapters):
            adapters.append(Adapter(
                rng.normal(0.0, scale, cfg.r * cfg.D).reshape(cfg.r, cfg.D),
                rng.normal(0.0, scale, cfg.r),
                rng.normal(0.0, scale, cfg.D * cfg.r).reshape(cfg.D, cfg.r),
                rng.normal(0.0, scale, cfg.D),
            ))
        return cls(adapters)


def random_backbone(cfg: ModelConfig, rng: Rng, scale: float = 0.25,
                    live_fraction: float = 0.12) -> FrozenBackbone:
    """Generic random backbone; used for gradient verification, not attacks.

    MLP biases place most GELU units in their exactly-saturated regime (the
    operating point of crafted backbones) and keep ``live_fraction`` of them
    in the curved region, so both branches of the activation are exercised.
    """
    D, Dh, L = cfg.D, cfg.D_h, cfg.L

    def mat(*shape, s=scale):
        return rng.normal(0.0, s, int(np.prod(shape))).reshape(shape)

    encoders = []
    for _ in range(cfg.num_encoders):
        b_mlp1 = 30.0 + 15.0 * rng.uniform(4 * D)
        live = rng.uniform(4 * D) < live_fraction
        b_mlp1[live] = rng.normal(0.0, 2.0, int(live.sum()))
        encoders.append(EncoderParams(
            ln1_w=1.0 + mat(D, s=0.1), ln1_b=mat(D, s=0.1),
            w_q=mat(L, Dh, Dh), b_q=mat(L, Dh, s=0.1),
            w_k=mat(L, Dh, Dh), b_k=mat(L, Dh, s=0.1),
            w_v=mat(L, Dh, D, s=scale / np.sqrt(D / Dh)), b_v=mat(L, Dh, s=0.1),
            w_msa=mat(D, D, s=scale / 2), ln2_w=1.0 + mat(D, s=0.1), ln2_b=mat(D, s=0.1),
            w_mlp1=mat(4 * D, D, s=scale / 2), b_mlp1=b_mlp1,
            w_mlp2=mat(D, 4 * D, s=scale / 2), b_mlp2=mat(D, s=0.1),
        ))
    return FrozenBackbone(
        embed=mat(D, cfg.patch_dim),
        class_token=mat(D, s=0.1),
        pos=mat(cfg.N + 1, D, s=1.0),
        encoders=encoders,
        ln_f_w=1.0 + mat(D, s=0.1),
        ln_f_b=mat(D, s=0.1),
        w_cls=mat(cfg.num_classes, D, s=0.1),
        b_cls=np.zeros(cfg.num_classes),
    )


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """Split C x H x W into N row-major patches, channel-major flattened."""
    image = as_f64(image)
    c, h, w = image.shape
    if h % p or w % p:
        raise ShapeError(f"{h}x{w} image not divisible by patch side {p}")
    gh, gw = h // p, w // p
    # (C, gh, p, gw, p) -> (gh, gw, C, p, p) -> (N, C*p*p)
    tiles = image.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return tiles.reshape(gh * gw, c * p * p)


def unpatchify(patches: np.ndarray, p: int, c: int, h: int, w: int) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    gh, gw = h // p, w // p
    tiles = as_f64(patches).reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4)
    return tiles.reshape(c, h, w)


def patchify_batch(images: np.ndarray, p: int) -> np.ndarray:
    return np.stack([patchify(img, p) for img in as_f64(images)])


def embed(patch: np.ndarray, e: np.ndarray, e_pos_n: np.ndarray) -> np.ndarray:
    """Linear patch embedding plus its position encoding."""
    return e @ as_f64(patch) + as_f64(e_pos_n)


def _dot(x: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    """x @ w_t with the leading axes flattened so BLAS sees one large GEMM."""
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ w_t).reshape(*lead, w_t.shape[-1])


def _layer_norm_cached(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_sd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_sd
    return xhat * w + b, {"xhat": xhat, "inv_sd": inv_sd, "w": w}


def _activation(cfg: ModelConfig):
    return relu if cfg.adapter_activation == "relu" else gelu


def adapter_forward(tokens: np.ndarray, adapter: Adapter, activation: str = "relu"):
    """Bottleneck adapter with internal skip: in + W_up act(W_down in + b) + b_up."""
    act_fn = relu if activation == "relu" else gelu
    v = _dot(tokens, adapter.w_down.T) + adapter.b_down
    act = act_fn(v)
    out = tokens + _dot(act, adapter.w_up.T) + adapter.b_up
    return out, {"input": tokens, "v": v, "act": act}


def msa_forward(tokens: np.ndarray, enc: EncoderParams, d_h: int):
    """Multi-head self attention over (..., T, D) tokens.

    Queries and keys for head h are built from the head's own D_h-slice;
    values are a general D_h x D projection of the full token, so a head can
    read coordinates outside its slice.
    """
    L = enc.w_q.shape[0]
    head_outs, head_cache = [], []
    scale = 1.0 / np.sqrt(d_h)
    for h in range(L):
        sl = tokens[..., h * d_h : (h + 1) * d_h]
        q = _dot(sl, enc.w_q[h].T) + enc.b_q[h]
        k = _dot(sl, enc.w_k[h].T) + enc.b_k[h]
        v = _dot(tokens, enc.w_v[h].T) + enc.b_v[h]
        logits = (q @ np.swapaxes(k, -1, -2)) * scale
        attn = softmax_rows(logits)
        head_outs.append(attn @ v)
        head_cache.append({"q": q, "k": k, "v": v, "attn": attn})
    concat = np.concatenate(head_outs, axis=-1)
    out = _dot(concat, enc.w_msa.T)
    return out, {"heads": head_cache, "concat": concat}


def _mlp_forward(z: np.ndarray, enc: EncoderParams):
    pre = _dot(z, enc.w_mlp1.T) + enc.b_mlp1
    hidden = gelu(pre)
    out = _dot(hidden, enc.w_mlp2.T) + enc.b_mlp2
    return out, {"z": z, "pre": pre, "hidden": hidden}


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy with a stable log-sum-exp; returns (loss, probs)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    losses = -logp[np.arange(len(labels)), labels]
    probs = np.exp(logp)
    return float(np.mean(losses)), probs, losses


@dataclass
class ForwardCache:
    tokens0: np.ndarray  # embeddings entering encoder 0, (M, N+1, D)
    sublayers: list = field(default_factory=list)  # per-sublayer dicts
    final: dict = field(default_factory=dict)
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    losses: np.ndarray | None = None
    loss: float = 0.0

    def adapter_input(self, a: int) -> np.ndarray:
        return self.sublayers[a]["adapter"]["input"]


def build_tokens(batch: Batch, backbone: FrozenBackbone, cfg: ModelConfig) -> np.ndarray:
    patches = patchify_batch(batch.images, cfg.P)  # (M, N, P^2C)
    x_map = patches @ backbone.embed.T  # (M, N, D)
    m = batch.size
    tokens = np.empty((m, cfg.N + 1, cfg.D))
    tokens[:, 0, :] = backbone.class_token + backbone.pos[0]
    tokens[:, 1:, :] = x_map + backbone.pos[1:]
    return tokens


def _run_sublayer(tokens, s, backbone, adapters, cfg, record):
    """One sublayer: LN -> core -> adapter -> residual. Returns new tokens."""
    enc = backbone.encoders[s // 2]
    is_msa = s % 2 == 0
    w_ln = enc.ln1_w if is_msa else enc.ln2_w
    b_ln = enc.ln1_b if is_msa else enc.ln2_b
    z, ln_cache = _layer_norm_cached(tokens, w_ln, b_ln)
    if is_msa:
        core, core_cache = msa_forward(z, enc, cfg.D_h)
    else:
        core, core_cache = _mlp_forward(z, enc)
    a_out, a_cache = adapter_forward(core, adapters[s], cfg.adapter_activation)
    new_tokens = tokens + a_out
    if record is not None:
        record.append({
            "u": tokens, "ln": ln_cache, "z": z, "is_msa": is_msa,
            "core": core_cache, "adapter": a_cache, "a_out": a_out,
        })
    return new_tokens


def _head(tokens, backbone, cfg, labels, record=None):
    zf, lnf_cache = _layer_norm_cached(tokens, backbone.ln_f_w, backbone.ln_f_b)
    if cfg.head_mode == "mean_pool":
        pooled = zf.mean(axis=-2)
    else:
        pooled = zf[..., 0, :]
    logits = _dot(pooled, backbone.w_cls.T) + backbone.b_cls
    flat_logits = logits.reshape(-1, cfg.num_classes)
    loss, probs, losses = cross_entropy(flat_logits, labels)
    if record is not None:
        record.update({"u": tokens, "ln": lnf_cache, "zf": zf, "pooled": pooled,
                       "labels": np.asarray(labels)})
    return logits, loss, probs, losses


def forward(batch: Batch, backbone: FrozenBackbone, adapters: AdapterSet,
            cfg: ModelConfig, want_cache: bool = True):
    """Full forward pass; returns (logits, loss, cache)."""
    if len(adapters) != cfg.num_adapters:
        raise ShapeError(f"expected {cfg.num_adapters} adapters, got {len(adapters)}")
    tokens = build_tokens(batch, backbone, cfg)
    cache = ForwardCache(tokens0=tokens) if want_cache else None
    record = cache.sublayers if want_cache else None
    for s in range(cfg.num_adapters):
        tokens = _run_sublayer(tokens, s, backbone, adapters, cfg, record)
    final_record = cache.final if want_cache else None
    logits, loss, probs, losses = _head(tokens, backbone, cfg, batch.labels,
                                        record=final_record)
    if want_cache:
        cache.logits = logits
        cache.probs = probs
        cache.losses = losses
        cache.loss = loss
    return logits, loss, cache
