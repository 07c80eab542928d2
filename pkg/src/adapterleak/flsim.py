"""Federated loop: local gradient computation, defenses, aggregation, attack.

The server crafts adapters per round and attacks the victim's individual
pre-aggregation gradient; aggregation still runs so the protocol surface
is exercised. The attack consumes only the gradient tensors plus the plan
and backbone the server already owns: batches and forward caches never
cross that boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import attack as attack_mod
from . import oracle
from .craft import (AttackPlan, CraftConfig, build_attack_plan, craft_adapters,
                    craft_backbone, measure_fingerprint_delta)
from .dataio import Batch, synth_batch
from .errors import ConfigError
from .grad import AdapterGradients, backward_adapters
from .metrics import ScoreReport, score_reconstruction
from .model import AdapterSet, FrozenBackbone, ModelConfig, forward
from .numerics import Rng
from .stats import estimate_patch_stats


@dataclass
class FLConfig:
    users: int = 4
    batch_size: int = 16
    rounds: int = 1
    local_epochs: int = 1
    learning_rate: float = 1e-4
    victim_index: int = 0
    mode: str = "single_step"
    seed: int = 0

    def __post_init__(self):
        if self.users < 1:
            raise ConfigError("need at least one user")
        if not 0 <= self.victim_index < self.users:
            raise ConfigError("victim index out of range")
        if self.mode not in ("single_step", "fedavg"):
            raise ConfigError(f"unknown FL mode {self.mode!r}")
        if self.rounds < 1:
            raise ConfigError("need at least one round")


@dataclass
class DefenseConfig:
    kind: str = "none"
    noise_rel_sigma: float = 0.0
    k_fraction: float = 1.0
    quant_levels: int = 256

    def __post_init__(self):
        if self.kind not in ("none", "gaussian_noise", "topk_prune",
                             "stochastic_quantize"):
            raise ConfigError(f"unknown defense {self.kind!r}")
        if self.noise_rel_sigma < 0:
            raise ConfigError("noise_rel_sigma must be nonnegative")
        if not 0 < self.k_fraction <= 1:
            raise ConfigError("k_fraction must lie in (0, 1]")
        if self.quant_levels < 2:
            raise ConfigError("need at least two quantization levels")


def local_step(batch: Batch, backbone: FrozenBackbone, adapters: AdapterSet,
               cfg: ModelConfig) -> AdapterGradients:
    """One local gradient computation (single-step client)."""
    _, _, cache = forward(batch, backbone, adapters, cfg)
    return backward_adapters(cache, backbone, adapters, cfg)


def _adapters_minus(base: AdapterSet, grads: AdapterGradients,
                    factor: float, cfg: ModelConfig) -> AdapterSet:
    out = base.copy()
    for a in range(cfg.num_adapters):
        out[a].w_down -= factor * grads.w_down[a]
        out[a].b_down -= factor * grads.b_down[a]
        out[a].w_up -= factor * grads.w_up[a]
        out[a].b_up -= factor * grads.b_up[a]
    return out


def local_fedavg(batch: Batch, backbone: FrozenBackbone, adapters: AdapterSet,
                 cfg: ModelConfig, epochs: int, lr: float) -> AdapterGradients:
    """Multi-epoch local training; returns (w0 - w_final) / (lr * epochs).

    The cumulative update is tracked as a running gradient sum rather than
    recovered by differencing the parameter tensors, which would lose the
    update below float64 resolution at these gradient scales. With one
    epoch the proxy equals the plain gradient bit-for-bit.
    """
    if epochs < 1:
        raise ConfigError("need at least one local epoch")
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    grad_sum: AdapterGradients | None = None
    for _ in range(epochs):
        current = adapters if grad_sum is None else _adapters_minus(
            adapters, grad_sum, lr, cfg)
        g = local_step(batch, backbone, current, cfg)
        if grad_sum is None:
            grad_sum = g
        else:
            grad_sum.w_down += g.w_down
            grad_sum.b_down += g.b_down
            grad_sum.w_up += g.w_up
            grad_sum.b_up += g.b_up
    assert grad_sum is not None
    scale = 1.0 / epochs
    return AdapterGradients(grad_sum.w_down * scale, grad_sum.b_down * scale,
                            grad_sum.w_up * scale, grad_sum.b_up * scale)


def apply_defense(g: AdapterGradients, d: DefenseConfig, rng: Rng) -> AdapterGradients:
    """Client-side gradient obfuscation; identity for kind 'none'."""
    if d.kind == "none":
        return g.copy()
    flat = g.flat()
    n = flat.size
    if d.kind == "gaussian_noise":
        if d.noise_rel_sigma == 0.0:
            return g.copy()
        norm = float(np.linalg.norm(flat))
        sigma = d.noise_rel_sigma * norm / np.sqrt(n)
        out = flat + (rng.normal(0.0, sigma, n) if sigma > 0 else 0.0)
    elif d.kind == "topk_prune":
        k = int(np.ceil(d.k_fraction * n))
        out = np.zeros_like(flat)
        if k >= n:
            out = flat.copy()
        else:
            order = np.argsort(-np.abs(flat), kind="stable")
            keep = order[:k]
            out[keep] = flat[keep]
    else:  # stochastic_quantize
        lo, hi = flat.min(), flat.max()
        if hi == lo:
            return g.copy()
        step = (hi - lo) / (d.quant_levels - 1)
        pos = (flat - lo) / step
        base = np.floor(pos)
        frac = pos - base
        up = rng.uniform(n) < frac
        out = lo + (base + up) * step
    return AdapterGradients.from_flat(out, g)


def aggregate(grads: list[AdapterGradients]) -> AdapterGradients:
    """Coordinate-wise mean in user order."""
    if not grads:
        raise ConfigError("nothing to aggregate")
    shapes = {g.flat().size for g in grads}
    if len(shapes) != 1:
        raise ConfigError("gradient shapes disagree across users")
    total = grads[0].copy()
    for g in grads[1:]:
        total.w_down += g.w_down
        total.b_down += g.b_down
        total.w_up += g.w_up
        total.b_up += g.b_up
    inv = 1.0 / len(grads)
    return AdapterGradients(total.w_down * inv, total.b_down * inv,
                            total.w_up * inv, total.b_up * inv)


@dataclass
class RoundLog:
    round_idx: int
    hits: int
    valid: int
    coverage: float
    mean_mse: float
    per_position: dict[int, dict[str, float]] = field(default_factory=dict)


@dataclass
class RunResult:
    merged: attack_mod.ReconstructionReport
    per_round: list[attack_mod.ReconstructionReport]
    round_logs: list[RoundLog]
    score: ScoreReport
    plan: AttackPlan
    backbone: FrozenBackbone
    victim_batch: Batch
    recovered_map: dict[tuple[int, int], np.ndarray]
    oracle_count_union: int
    victim_grads: AdapterGradients | None = None


def recovered_pixel_map(report: attack_mod.ReconstructionReport,
                        stats_mn: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """(image, position) -> recovered pixels, via ground-truth stat matching."""
    labels = oracle.match_patches(report, stats_mn)
    out: dict[tuple[int, int], np.ndarray] = {}
    for patch, m in zip(report.valid_patches, labels):
        if m is None:
            continue
        key = (m, patch.position)
        if key not in out:
            out[key] = patch.pixels
    return out


def run_experiment(model_cfg: ModelConfig, craft_cfg: CraftConfig,
                   fl_cfg: FLConfig, defense: DefenseConfig,
                   positions: list[int], adapters_per_position: int,
                   data_kind: str = "smooth", public_count: int = 256,
                   public_images: np.ndarray | None = None) -> RunResult:
    """Full multi-round pipeline; deterministic under the configured seeds."""
    backbone, embed_info = craft_backbone(craft_cfg, model_cfg)
    root = Rng(fl_cfg.seed)
    data_rng = root.spawn(101)
    defense_rng = root.spawn(202)

    if public_images is None:
        public = synth_batch(public_count, model_cfg,
                             seed=int(data_rng.spawn(0).seed), kind=data_kind)
        public_images = public.images
    stats = estimate_patch_stats(public_images, backbone.embed, backbone.pos,
                                 model_cfg)
    fp_delta = 1.0
    if craft_cfg.fingerprint_enabled:
        fp_delta = measure_fingerprint_delta(public_images, backbone.embed, model_cfg)
    plan = build_attack_plan(stats, model_cfg, positions, adapters_per_position,
                             fl_cfg.rounds, embed_info, craft_cfg, fp_delta)

    m = fl_cfg.batch_size
    victim_batch = synth_batch(m, model_cfg, seed=int(data_rng.spawn(1).seed),
                               kind=data_kind)
    stats_mn = oracle.true_statistics(victim_batch, backbone, model_cfg)
    truth = oracle.ground_truth_patches(victim_batch, model_cfg)

    merged: attack_mod.ReconstructionReport | None = None
    per_round: list[attack_mod.ReconstructionReport] = []
    logs: list[RoundLog] = []
    for rho in range(fl_cfg.rounds):
        adapters = craft_adapters(plan, backbone, craft_cfg, model_cfg, rho)
        user_grads = []
        for u in range(fl_cfg.users):
            if u == fl_cfg.victim_index:
                batch = victim_batch
            else:
                seed = int(data_rng.spawn(1000 + rho * fl_cfg.users + u).seed)
                batch = synth_batch(m, model_cfg, seed=seed, kind=data_kind)
            if fl_cfg.mode == "single_step":
                g = local_step(batch, backbone, adapters, model_cfg)
            else:
                g = local_fedavg(batch, backbone, adapters, model_cfg,
                                 fl_cfg.local_epochs, fl_cfg.learning_rate)
            g = apply_defense(g, defense, defense_rng.spawn(rho * fl_cfg.users + u))
            user_grads.append(g)
        aggregate(user_grads)  # protocol step; the attack reads the victim's share
        victim_grads = user_grads[fl_cfg.victim_index]
        report = attack_mod.run_attack(victim_grads, plan, backbone.pos, rho, m)
        per_round.append(report)
        merged = report if merged is None else attack_mod.merge_rounds(
            [merged, report], plan)
        rec_map = recovered_pixel_map(merged, stats_mn)
        score = score_reconstruction(rec_map, truth, model_cfg.P, model_cfg.C)
        log = RoundLog(round_idx=rho, hits=len(report.patches),
                       valid=len(report.valid_patches),
                       coverage=merged.coverage, mean_mse=score.mean_mse)
        for t in plan.positions():
            round_valid = [p for p in report.valid_patches if p.position == t]
            round_hits = [p for p in report.patches if p.position == t]
            log.per_position[t] = {
                "bins_active": len(round_hits),
                "patches_valid": len(round_valid),
            }
        logs.append(log)

    assert merged is not None
    rec_map = recovered_pixel_map(merged, stats_mn)
    score = score_reconstruction(rec_map, truth, model_cfg.P, model_cfg.C)
    return RunResult(
        merged=merged,
        per_round=per_round,
        round_logs=logs,
        score=score,
        plan=plan,
        backbone=backbone,
        victim_batch=victim_batch,
        recovered_map=rec_map,
        oracle_count_union=oracle.isolated_union(stats_mn, plan),
        victim_grads=victim_grads,
    )


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
