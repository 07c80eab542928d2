"""Command-line surface: craft, run, attack, sweep, gradcheck, report.

Experiment configs are sectioned key=value files; every field is validated
before any computation and the fully resolved config is echoed next to the
outputs so a run can be replayed byte-for-byte.
"""

from __future__ import annotations

import argparse
import configparser
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from .craft import (CraftConfig, build_attack_plan, craft_adapters,
                    craft_backbone, measure_fingerprint_delta, plan_from_json,
                    plan_to_json)
from .dataio import denormalize, save_ppm, synth_batch
from .errors import ConfigError
from .flsim import DefenseConfig, FLConfig, config_hash, run_experiment
from .grad import finite_diff_check, thread_count
from .metrics import fmt, write_csv, write_json
from .model import AdapterSet, ModelConfig, random_backbone
from .numerics import Rng
from .serialize import (read_backbone, read_gradients, write_adapters,
                        write_backbone, write_gradients)

_DEFAULTS = {
    "model": {
        "D": "96", "L": "4", "num_encoders": "6", "P": "4", "C": "3",
        "H": "8", "W": "8", "r": "8", "num_classes": "10",
        "adapter_activation": "relu", "head_mode": "mean_pool",
    },
    "craft": {
        "sigma_pos": "10.0", "pos_dist": "gaussian", "gamma": "1e4",
        "epsilon_up": "1e-6", "margin": "50.0", "fingerprint_enabled": "false",
        "embed_mode": "identity_pad", "seed": "7",
    },
    "fl": {
        "users": "2", "batch_size": "16", "rounds": "1", "local_epochs": "1",
        "learning_rate": "1e-4", "victim_index": "0", "mode": "single_step",
        "seed": "11",
    },
    "plan": {
        "positions": "all", "adapters_per_position": "3",
    },
    "defense": {
        "kind": "none", "noise_rel_sigma": "0.0", "k_fraction": "1.0",
        "quant_levels": "256",
    },
    "data": {
        "kind": "smooth", "public_count": "256",
    },
}

_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _parse_bool(v: str) -> bool:
    try:
        return _BOOL[v.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {v!r}") from None


@dataclass
class ExperimentConfig:
    model: ModelConfig
    craft: CraftConfig
    fl: FLConfig
    defense: DefenseConfig
    positions: list[int]
    adapters_per_position: int
    data_kind: str
    public_count: int
    resolved_text: str

    @property
    def hash(self) -> str:
        return config_hash(self.resolved_text)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    merged = {s: dict(kv) for s, kv in _DEFAULTS.items()}
    for section in parser.sections():
        if section not in merged:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser[section].items():
            if key not in merged[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            merged[section][key] = value
    return _resolve(merged)


def _resolve(merged: dict) -> ExperimentConfig:
    m = merged["model"]
    model = ModelConfig(
        D=int(m["D"]), L=int(m["L"]), num_encoders=int(m["num_encoders"]),
        P=int(m["P"]), C=int(m["C"]), H=int(m["H"]), W=int(m["W"]),
        r=int(m["r"]), num_classes=int(m["num_classes"]),
        adapter_activation=m["adapter_activation"], head_mode=m["head_mode"])
    c = merged["craft"]
    craft = CraftConfig(
        sigma_pos=float(c["sigma_pos"]), pos_dist=c["pos_dist"],
        gamma=float(c["gamma"]), epsilon_up=float(c["epsilon_up"]),
        margin=float(c["margin"]),
        fingerprint_enabled=_parse_bool(c["fingerprint_enabled"]),
        embed_mode=c["embed_mode"], seed=int(c["seed"]))
    f = merged["fl"]
    fl = FLConfig(
        users=int(f["users"]), batch_size=int(f["batch_size"]),
        rounds=int(f["rounds"]), local_epochs=int(f["local_epochs"]),
        learning_rate=float(f["learning_rate"]),
        victim_index=int(f["victim_index"]), mode=f["mode"], seed=int(f["seed"]))
    d = merged["defense"]
    defense = DefenseConfig(
        kind=d["kind"], noise_rel_sigma=float(d["noise_rel_sigma"]),
        k_fraction=float(d["k_fraction"]), quant_levels=int(d["quant_levels"]))
    p = merged["plan"]
    if p["positions"].strip() == "all":
        positions = list(range(1, model.N + 1))
    else:
        positions = [int(x) for x in p["positions"].split(",") if x.strip()]
    data = merged["data"]
    if data["kind"] not in ("uniform", "smooth"):
        raise ConfigError(f"unknown data kind {data['kind']!r}")

    lines = []
    for section in ("model", "craft", "fl", "plan", "defense", "data"):
        lines.append(f"[{section}]")
        for key in sorted(merged[section]):
            lines.append(f"{key} = {merged[section][key]}")
        lines.append("")
    return ExperimentConfig(
        model=model, craft=craft, fl=fl, defense=defense, positions=positions,
        adapters_per_position=int(p["adapters_per_position"]),
        data_kind=data["kind"], public_count=int(data["public_count"]),
        resolved_text="\n".join(lines))


def default_config_text() -> str:
    lines = []
    for section, kv in _DEFAULTS.items():
        lines.append(f"[{section}]")
        for key in sorted(kv):
            lines.append(f"{key} = {kv[key]}")
        lines.append("")
    return "\n".join(lines)


def _prepare_out(out: str, cfg: ExperimentConfig) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.cfg").write_text(cfg.resolved_text)
    return out_dir


def cmd_craft(args) -> int:
    cfg = load_config(args.config)
    out = _prepare_out(args.out, cfg)
    backbone, embed_info = craft_backbone(cfg.craft, cfg.model)
    public = synth_batch(cfg.public_count, cfg.model,
                         seed=int(Rng(cfg.fl.seed).spawn(101).spawn(0).seed),
                         kind=cfg.data_kind)
    from .stats import estimate_patch_stats

    stats = estimate_patch_stats(public.images, backbone.embed, backbone.pos,
                                 cfg.model)
    delta = measure_fingerprint_delta(public.images, backbone.embed, cfg.model) \
        if cfg.craft.fingerprint_enabled else 1.0
    plan = build_attack_plan(stats, cfg.model, cfg.positions,
                             cfg.adapters_per_position, cfg.fl.rounds,
                             embed_info, cfg.craft, delta)
    write_backbone(backbone, out / "backbone.plta")
    (out / "plan.json").write_text(plan_to_json(plan))
    for rho in range(cfg.fl.rounds):
        adapters = craft_adapters(plan, backbone, cfg.craft, cfg.model, rho)
        write_adapters(adapters, out / f"adapters_round{rho}.plta")
    print(f"crafted backbone, plan, and {cfg.fl.rounds} adapter round(s) -> {out}")
    return 0


def _emit_run_outputs(out: Path, cfg: ExperimentConfig, result) -> None:
    rows = []
    for log in result.round_logs:
        for t in sorted(log.per_position):
            pp = log.per_position[t]
            rows.append([log.round_idx, t, int(pp["bins_active"]),
                         int(pp["patches_valid"]), log.coverage, log.mean_mse])
    write_csv(out / "rounds.csv",
              ["round", "position", "bins_active", "patches_valid",
               "coverage", "mean_mse"], rows)
    summary = {
        "config_hash": cfg.hash,
        "rounds": [
            {"round": log.round_idx, "hits": log.hits, "valid": log.valid,
             "coverage": log.coverage, "mean_mse": log.mean_mse}
            for log in result.round_logs
        ],
        "coverage": result.merged.coverage,
        "matched_patches": len(result.recovered_map),
        "oracle_isolated_union": result.oracle_count_union,
        "mean_mse": result.score.mean_mse,
        "mean_ssim": result.score.mean_ssim,
        "recovery_rate": result.score.recovery_rate,
        # measured wall time is printed, not written: output bytes are a
        # pure function of config + seed
        "runtime_s": None,
    }
    write_json(out / "summary.json", summary)
    mc = cfg.model
    truth_imgs = result.victim_batch.images
    for i in range(truth_imgs.shape[0]):
        save_ppm(denormalize(truth_imgs[i]), out / f"truth_{i:03d}.ppm")
    recovered = _render_recovered(result, mc)
    for i in range(recovered.shape[0]):
        save_ppm(denormalize(recovered[i]), out / f"recovered_{i:03d}.ppm")


def _render_recovered(result, mc: ModelConfig) -> np.ndarray:
    from .model import unpatchify

    m = result.victim_batch.size
    out = np.zeros((m, mc.C, mc.H, mc.W))
    for i in range(m):
        patches = np.zeros((mc.N, mc.patch_dim))
        for t in range(1, mc.N + 1):
            pix = result.recovered_map.get((i, t))
            if pix is not None:
                patches[t - 1] = np.clip(pix, -1.0, 1.0)
        out[i] = unpatchify(patches, mc.P, mc.C, mc.H, mc.W)
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _prepare_out(args.out, cfg)
    t0 = time.perf_counter()
    result = run_experiment(cfg.model, cfg.craft, cfg.fl, cfg.defense,
                            cfg.positions, cfg.adapters_per_position,
                            data_kind=cfg.data_kind,
                            public_count=cfg.public_count)
    _emit_run_outputs(out, cfg, result)
    # last-round victim observation plus the attacker artifacts, so the
    # attack subcommand can rerun offline from files alone
    write_gradients(result.victim_grads, cfg.fl.batch_size, out / "grads.plta")
    write_backbone(result.backbone, out / "backbone.plta")
    (out / "plan.json").write_text(plan_to_json(result.plan))
    runtime = time.perf_counter() - t0
    print(f"run complete in {runtime:.2f}s: coverage {result.merged.coverage:.3f}, "
          f"matched {len(result.recovered_map)}, mean MSE {result.score.mean_mse:.4f} -> {out}")
    return 0


def cmd_attack(args) -> int:
    grads, m = read_gradients(args.grads)
    plan = plan_from_json(Path(args.plan).read_text())
    backbone = read_backbone(args.backbone)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for rho in range(plan.rounds) if args.round is None else [args.round]:
        reports.append(attack_mod.run_attack(grads, plan, backbone.pos, rho, m))
    merged = reports[0] if len(reports) == 1 else attack_mod.merge_rounds(reports, plan)
    rows = [[p.position, p.bin_index, p.round_idx, int(p.valid), p.stat_check]
            for p in merged.patches]
    write_csv(out / "patches.csv",
              ["position", "bin_index", "round", "valid", "stat_check"], rows)
    write_json(out / "attack_summary.json", {
        "patches_total": len(merged.patches),
        "patches_valid": len(merged.valid_patches),
        "coverage": merged.coverage,
    })
    print(f"attack recovered {len(merged.valid_patches)} valid patches "
          f"(coverage {merged.coverage:.3f}) -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    mc_kwargs = {**cfg.model.__dict__}
    mc_kwargs["adapter_activation"] = "gelu"  # smooth surface for differencing
    mc = ModelConfig(**mc_kwargs)
    rng = Rng(cfg.craft.seed)
    backbone = random_backbone(mc, rng.spawn(1))
    adapters = AdapterSet.random(mc, rng.spawn(2), scale=0.2)
    batch = synth_batch(cfg.fl.batch_size, mc, seed=cfg.fl.seed,
                        kind="uniform")
    report = finite_diff_check(backbone, adapters, batch, mc,
                               h=args.h, tolerance=args.tolerance)
    status = "PASS" if report.passed else "FAIL"
    print(f"gradcheck {status}: max rel err {fmt(report.max_rel_err)} "
          f"(tolerance {fmt(report.tolerance)}, floor {fmt(report.floor)}) "
          f"over {report.n_params} parameters in {report.runtime_s:.1f}s; "
          f"worst at {report.worst_param}")
    return 0 if report.passed else 3


def _sweep_values(kind: str, raw: str):
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if kind in ("batch", "r", "layers", "rounds"):
        return [int(v) for v in vals]
    return [float(v) for v in vals]


def _sweep_cell(cfg: ExperimentConfig, kind: str, value, seed: int):
    model, fl, defense = cfg.model, cfg.fl, cfg.defense
    positions, s_t = cfg.positions, cfg.adapters_per_position
    mc_kwargs = {**model.__dict__}
    fl_kwargs = {**fl.__dict__}
    d_kwargs = {**defense.__dict__}
    if kind == "batch":
        fl_kwargs["batch_size"] = value
    elif kind == "r":
        mc_kwargs["r"] = value
    elif kind == "layers":
        s_t = value
    elif kind == "rounds":
        fl_kwargs["rounds"] = value
    elif kind == "noise":
        d_kwargs.update(kind="gaussian_noise", noise_rel_sigma=value)
    else:
        raise ConfigError(f"unknown sweep variable {kind!r}")
    fl_kwargs["seed"] = seed
    result = run_experiment(ModelConfig(**mc_kwargs), cfg.craft,
                            FLConfig(**fl_kwargs), DefenseConfig(**d_kwargs),
                            positions, s_t, data_kind=cfg.data_kind,
                            public_count=cfg.public_count)
    return result.score.recovery_rate, result.score.mean_mse, result.score.mean_ssim


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _prepare_out(args.out, cfg)
    values = _sweep_values(args.vary, args.values)
    seeds = [cfg.fl.seed + 1000 * i for i in range(args.seeds)]
    cells = [(v, s) for v in values for s in seeds]
    workers = min(thread_count(), len(cells))

    def run_cell(cell):
        v, s = cell
        return cell, _sweep_cell(cfg, args.vary, v, s)

    results = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for cell, res in pool.map(run_cell, cells):
                results[cell] = res
    else:
        for cell in cells:
            results[cell] = run_cell(cell)[1]

    rows = []
    for v in values:
        rates = [results[(v, s)][0] for s in seeds]
        mses = [results[(v, s)][1] for s in seeds]
        ssims = [results[(v, s)][2] for s in seeds]
        rows.append([args.vary, v, float(np.mean(rates)), float(np.mean(mses)),
                     float(np.mean(ssims))])
    write_csv(out / "sweep.csv",
              ["sweep_name", "x_value", "recovery_rate", "mean_mse", "mean_ssim"],
              rows)
    print(f"sweep over {args.vary} ({len(values)} values x {len(seeds)} seeds) -> {out}")
    return 0


def cmd_report(args) -> int:
    src = Path(args.indir)
    summary_path = src / "summary.json"
    if not summary_path.exists():
        raise ConfigError(f"no summary.json under {src}")
    import json as _json

    summary = _json.loads(summary_path.read_text())
    print("run summary")
    for key in ("config_hash", "coverage", "matched_patches",
                "oracle_isolated_union", "mean_mse", "mean_ssim",
                "recovery_rate"):
        print(f"  {key}: {summary.get(key)}")
    truth = sorted(src.glob("truth_*.ppm"))
    rec = sorted(src.glob("recovered_*.ppm"))
    if truth and rec:
        from .dataio import load_ppm

        pairs = list(zip(truth, rec))
        imgs = [np.concatenate([load_ppm(a), load_ppm(b)], axis=2)
                for a, b in pairs]
        mosaic = np.concatenate(imgs, axis=1)
        save_ppm(mosaic, src / "mosaic.ppm")
        print(f"  mosaic (truth | recovered): {src / 'mosaic.ppm'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adapterleak",
        description="Desk-scale federated adapter fine-tuning and gradient "
                    "inversion laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("craft", help="craft backbone, plan, and adapter rounds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_craft)

    p = sub.add_parser("run", help="run the full federated attack pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="reconstruct from serialized gradients")
    p.add_argument("--grads", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--round", type=int, default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("gradcheck", help="verify adapter gradients against "
                                         "central finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="sweep one knob over values x seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--vary", required=True,
                   choices=["batch", "r", "layers", "rounds", "noise"])
    p.add_argument("--values", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--in", dest="indir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
