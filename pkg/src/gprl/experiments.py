"""Experiment harness tying the solver into reproducible run directories.

Every command writes one run directory under the output root:

    out/<run_id>/manifest.txt   # full config echo + command (re-runnable)
    out/<run_id>/metrics.csv    # fixed schema, 6-decimal floats, LF endings
    out/<run_id>/images/*.pgm   # ground truth / observation / reconstruction
    out/<run_id>/traces/*.csv   # per-iteration loss traces

run_id is a pure function of (command, master seed), and all randomness
derives from the master seed, so re-running a command with the same config
reproduces every byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_from_pairs, parse_config_text
from .dataset import make_blob_dataset
from .degrade import robustness_pipeline
from .errors import ConfigError
from .flow import FlowModel, flow_eval, flow_from_store, flow_inverse, flow_to_store, \
    train_flow
from .generator import GeneratorBundle, build_generator, gen_from_store, \
    gen_to_store, mapping_eval, mean_latent, sample_images, train_decoder
from .metrics import gaussianization_report, lr_consistency, ms_ssim, psnr, ssim
from .objective import PriorWeights
from .pgm import write_pgm
from .seeds import derive_seed
from .solver import ALL_VARIANTS, SolveResult, SolverConfig, run_variant
from .weights_io import load_weights, save_weights

CSV_COLUMNS = ("run_id", "variant", "lambda_w", "lambda_g", "lambda_c", "factor",
               "corruption", "psnr", "ssim", "ms_ssim_2", "lr_consistency_l1",
               "density_score", "norm_stat", "seed")

ROBUSTNESS_SPECS = ("none", "gauss:0.1", "sp:0.05", "blur:1.0", "motion:100")
SWEEP_PARAMETERS = ("lambda_w", "lambda_g")


@dataclass
class RunResult:
    command: str
    run_id: str
    out_dir: str
    csv_path: str | None
    rows: list[dict]
    extra: dict = field(default_factory=dict)


# -- reporting helpers ---------------------------------------------------------------


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def emit_csv(rows: list[dict], path) -> None:
    """Fixed-schema metrics CSV; header always present, LF endings, UTF-8."""
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(format_cell(row[c]) for c in CSV_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def parse_csv(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [l for l in text.split("\n") if l]
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def write_manifest(cfg: ExperimentConfig, command: str, path,
                   extras: dict | None = None) -> None:
    pairs = dict(cfg.to_flat())
    lines = [f"# generated by gprl {__version__}", f"command = {command}"]
    for k, v in (extras or {}).items():
        lines.append(f"{k} = {v}")
    lines += [f"{k} = {v}" for k, v in pairs.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_from_manifest(manifest_path, out_override: str | None = None) -> RunResult:
    """Re-run the exact command a run directory was produced by."""
    pairs = parse_config_text(Path(manifest_path).read_text())
    command = pairs.pop("command", None)
    if command is None:
        raise ConfigError(f"manifest {manifest_path} has no command line")
    parameter = pairs.pop("sweep.parameter", None)
    grid = pairs.pop("sweep.grid", None)
    cfg = config_from_pairs(pairs)
    if command == "sr_sweep":
        values = [float(v) for v in grid.split()] if grid else None
        return cmd_sr_sweep(cfg, parameter, values, out_override)
    dispatch = {
        "gen_init": cmd_gen_init, "gen_train": cmd_gen_train,
        "flow_train": cmd_flow_train, "flow_check": cmd_flow_check,
        "sr_run": cmd_sr_run, "sr_ablate": cmd_sr_ablate,
        "eval_robustness": cmd_eval_robustness,
        "eval_gaussianization": cmd_eval_gaussianization,
    }
    if command not in dispatch:
        raise ConfigError(f"manifest names unknown command {command!r}")
    return dispatch[command](cfg, out_override)


def _run_dir(cfg: ExperimentConfig, command: str, out_override: str | None) -> tuple[str, Path]:
    run_id = f"{command}-s{cfg.run_seed}"
    out_dir = cfg.out_root(out_override) / run_id
    out_dir.mkdir(parents=True, exist_ok=True)
    return run_id, out_dir


def _write_trace(trace: list[float], path) -> None:
    lines = ["iteration,loss"] + [f"{i},{v:.6f}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- artifact loading -----------------------------------------------------------------


def load_generator(cfg: ExperimentConfig) -> GeneratorBundle:
    path = Path(cfg.gen_weights)
    if not path.exists():
        raise ConfigError(f"generator weights not found at {path} (run `gen init` "
                          f"or `gen train` first)")
    gen = gen_from_store(load_weights(path))
    if gen.latent_dim != cfg.gen_latent_dim or gen.layer_count != cfg.gen_layers:
        raise ConfigError(
            f"generator weights at {path} are d={gen.latent_dim}, L={gen.layer_count}; "
            f"config wants d={cfg.gen_latent_dim}, L={cfg.gen_layers}")
    return gen


def load_flow(cfg: ExperimentConfig) -> FlowModel:
    path = Path(cfg.flow_weights)
    if not path.exists():
        raise ConfigError(f"flow weights not found at {path} (run `flow train` first)")
    flow = flow_from_store(load_weights(path))
    if flow.latent_dim != cfg.gen_latent_dim:
        raise ConfigError(f"flow weights at {path} have d={flow.latent_dim}; "
                          f"config wants d={cfg.gen_latent_dim}")
    return flow


def solver_config(cfg: ExperimentConfig, gen: GeneratorBundle) -> SolverConfig:
    init = mean_latent(gen, cfg.solver_init_samples,
                       derive_seed(cfg.run_seed, "init-latent"))
    return SolverConfig(
        weights=PriorWeights(cfg.solver_lambda_w, cfg.solver_lambda_g,
                             cfg.solver_lambda_c),
        rls_iterations=cfg.solver_rls_iterations, rls_lr=cfg.solver_rls_lr,
        init_samples=cfg.solver_init_samples,
        plus_iterations=cfg.solver_plus_iterations, plus_lr=cfg.solver_plus_lr,
        radius=cfg.solver_radius or None,
        trainable_layers=cfg.solver_trainable_layers or None,
        ball_mode=cfg.solver_ball_mode, patience=cfg.solver_patience,
        diverse_init=cfg.solver_diverse_init, seed=cfg.run_seed, init_latent=init)


# -- targets ---------------------------------------------------------------------------


def make_targets(cfg: ExperimentConfig, gen: GeneratorBundle) -> list[dict]:
    """Seeded high-resolution targets; kind per cfg.run_targets."""
    count, side = cfg.run_images, cfg.side
    seed = derive_seed(cfg.run_seed, "targets")
    if cfg.run_targets == "blobs":
        imgs = make_blob_dataset(count, side, seed)
        return [{"hr": imgs[k], "w_true": None} for k in range(count)]
    codes, imgs = sample_images(gen, count, seed)
    targets = [{"hr": imgs[k], "w_true": codes[k]} for k in range(count)]
    if cfg.run_targets == "generator_patch":
        rng = np.random.default_rng(derive_seed(cfg.run_seed, "target-patch"))
        patch = max(4, side // 5)
        for t in targets:
            img = t["hr"].copy()
            r = rng.integers(0, side - patch)
            c = rng.integers(0, side - patch)
            shift = rng.uniform(0.25, 0.45) * rng.choice([-1.0, 1.0])
            img[r:r + patch, c:c + patch] = np.clip(
                img[r:r + patch, c:c + patch] + shift, 0.0, 1.0)
            t["hr"] = img
            t["w_true"] = None  # the patch pushes the image out of the range
    return targets


def observation_for(cfg: ExperimentConfig, hr: np.ndarray, index: int,
                    corruption: str | None = None) -> np.ndarray:
    spec = cfg.run_corruption if corruption is None else corruption
    return robustness_pipeline(hr, spec, cfg.run_factor,
                               derive_seed(cfg.run_seed, f"corrupt-{index}"))


def metrics_row(cfg: ExperimentConfig, run_id: str, variant: str,
                result: SolveResult, hr: np.ndarray, y: np.ndarray,
                corruption: str = "none",
                weights: PriorWeights | None = None) -> dict:
    w = weights or PriorWeights(cfg.solver_lambda_w, cfg.solver_lambda_g,
                                cfg.solver_lambda_c)
    return {
        "run_id": run_id, "variant": variant,
        "lambda_w": w.lambda_w, "lambda_g": w.lambda_g, "lambda_c": w.lambda_c,
        "factor": cfg.run_factor, "corruption": corruption,
        "psnr": psnr(result.image, hr), "ssim": ssim(result.image, hr),
        "ms_ssim_2": ms_ssim(result.image, hr, scales=2),
        "lr_consistency_l1": lr_consistency(result.image, y, cfg.run_factor),
        "density_score": result.density, "norm_stat": result.norms,
        "seed": cfg.run_seed,
    }


# -- commands ---------------------------------------------------------------------------


def cmd_gen_init(cfg: ExperimentConfig, out_override: str | None = None) -> RunResult:
    """Build the fixed-mode generator and persist its weights."""
    gen = build_generator(cfg.gen_latent_dim, cfg.gen_layers, cfg.gen_channels,
                          cfg.gen_mapping_hidden,
                          seed=derive_seed(cfg.run_seed, "generator"), mode="fixed")
    path = Path(cfg.gen_weights)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(gen_to_store(gen), path)
    run_id, out_dir = _run_dir(cfg, "gen_init", out_override)
    write_manifest(cfg, "gen_init", out_dir / "manifest.txt")
    return RunResult("gen_init", run_id, str(out_dir), None, [],
                     {"weights": str(path), "side": gen.side})


def cmd_gen_train(cfg: ExperimentConfig, out_override: str | None = None) -> RunResult:
    """Train the blob autoencoder and persist the resulting generator."""
    blobs = make_blob_dataset(cfg.gen_train_images, cfg.side,
                              derive_seed(cfg.run_seed, "gen-train-blobs"))
    gen = train_decoder(blobs, cfg.gen_latent_dim, cfg.gen_layers, cfg.gen_channels,
                        cfg.gen_mapping_hidden, cfg.gen_train_epochs,
                        cfg.gen_train_lr, seed=derive_seed(cfg.run_seed, "generator"))
    path = Path(cfg.gen_weights)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(gen_to_store(gen), path)
    run_id, out_dir = _run_dir(cfg, "gen_train", out_override)
    write_manifest(cfg, "gen_train", out_dir / "manifest.txt")
    return RunResult("gen_train", run_id, str(out_dir), None, [],
                     {"weights": str(path), "images": cfg.gen_train_images})


def cmd_flow_train(cfg: ExperimentConfig, out_override: str | None = None) -> RunResult:
    """Fit the style-density flow on mapping-network samples and persist it."""
    gen = load_generator(cfg)
    rng = np.random.default_rng(derive_seed(cfg.run_seed, "flow-train-samples"))
    z = rng.standard_normal((cfg.flow_train_samples, gen.latent_dim)).astype(np.float32)
    samples = mapping_eval(gen, z)
    flow, history = train_flow(samples, cfg.flow_blocks, cfg.flow_hidden,
                               cfg.flow_epochs, cfg.flow_lr, cfg.flow_batch,
                               seed=derive_seed(cfg.run_seed, "flow-train"))
    path = Path(cfg.flow_weights)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(flow_to_store(flow), path)
    run_id, out_dir = _run_dir(cfg, "flow_train", out_override)
    write_manifest(cfg, "flow_train", out_dir / "manifest.txt")
    extra = {"weights": str(path),
             "holdout_before": history["holdout_before"],
             "holdout_after": history["holdout_after"]}
    (out_dir / "history.json").write_text(json.dumps(
        {k: history[k] for k in ("train_loss", "holdout_before", "holdout_after")},
        indent=2))
    return RunResult("flow_train", run_id, str(out_dir), None, [], extra)


def cmd_flow_check(cfg: ExperimentConfig, out_override: str | None = None) -> RunResult:
    """Invertibility and log-det diagnostics for the trained flow."""
    gen = load_generator(cfg)
    flow = load_flow(cfg)
    rng = np.random.default_rng(derive_seed(cfg.run_seed, "flow-check"))
    w = mapping_eval(gen, rng.standard_normal((1000, gen.latent_dim))
                     .astype(np.float32))
    z, _ = flow_eval(flow, w)
    back = flow_inverse(flow, z)
    round_trip = float(np.max(np.abs(back - w)))
    report = gaussianization_report(flow, gen, 5000,
                                    derive_seed(cfg.run_seed, "flow-check-report"))
    run_id, out_dir = _run_dir(cfg, "flow_check", out_override)
    write_manifest(cfg, "flow_check", out_dir / "manifest.txt")
    extra = {"round_trip_max_abs": round_trip,
             "round_trip_ok": round_trip < 1e-4,
             "mean_sq_norm": report.mean_sq_norm,
             "ks_stat_flowed": report.ks_stat_flowed,
             "ks_stat_raw": report.ks_stat_raw,
             "ks_threshold": report.ks_threshold,
             "gaussianization_ok": report.passed}
    (out_dir / "summary.json").write_text(json.dumps(extra, indent=2))
    return RunResult("flow_check", run_id, str(out_dir), None, [], extra)


def _solve_rows(cfg: ExperimentConfig, run_id: str, out_dir: Path, gen, flow,
                scfg: SolverConfig, variant: str, targets: list[dict],
                corruption: str = "none", save_images: bool = True,
                weights: PriorWeights | None = None,
                trace_tag: str | None = None) -> tuple[list[dict], list[SolveResult]]:
    rows, results = [], []
    img_dir = out_dir / "images"
    trace_dir = out_dir / "traces"
    if save_images:
        img_dir.mkdir(exist_ok=True)
    trace_dir.mkdir(exist_ok=True)
    for k, target in enumerate(targets):
        y = observation_for(cfg, target["hr"], k, corruption)
        result = run_variant(y, gen, flow, scfg, variant, cfg.run_factor)
        rows.append(metrics_row(cfg, run_id, variant, result, target["hr"], y,
                                corruption, weights))
        results.append(result)
        tag = trace_tag or variant
        _write_trace(result.trace, trace_dir / f"{k:03d}_{tag}.csv")
        if save_images:
            write_pgm(target["hr"], img_dir / f"{k:03d}_gt.pgm")
            write_pgm(y, img_dir / f"{k:03d}_lr.pgm")
            write_pgm(result.image, img_dir / f"{k:03d}_recon_{tag}.pgm")
    return rows, results


def cmd_sr_run(cfg: ExperimentConfig, out_override: str | None = None) -> RunResult:
    """Super-resolve a seeded target suite with one pipeline variant."""
    gen = load_generator(cfg)
    flow = load_flow(cfg)
    scfg = solver_config(cfg, gen)
    targets = make_targets(cfg, gen)
    run_id, out_dir = _run_dir(cfg, "sr_run", out_override)
    rows, results = _solve_rows(cfg, run_id, out_dir, gen, flow, scfg,
                                cfg.run_variant, targets,
                                corruption=cfg.run_corruption)
    csv_path = out_dir / "metrics.csv"
    emit_csv(rows, csv_path)
    write_manifest(cfg, "sr_run", out_dir / "manifest.txt")
    extra = {"data_terms": [r.data_term for r in results]}
    return RunResult("sr_run", run_id, str(out_dir), str(csv_path), rows, extra)


def cmd_sr_sweep(cfg: ExperimentConfig, parameter: str,
                 grid: list[float] | None = None,
                 out_override: str | None = None) -> RunResult:
    """Anchor-stage sweep of one prior weight with the other two zeroed."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMETERS}")
    grid = list(grid) if grid else [1e-3, 1e-2, 1e-1, 1.0]
    if sorted(grid) != grid:
        raise ConfigError("sweep grid must be sorted ascending")
    gen = load_generator(cfg)
    flow = load_flow(cfg)
    scfg = solver_config(cfg, gen)
    targets = make_targets(cfg, gen)
    run_id, out_dir = _run_dir(cfg, "sr_sweep", out_override)
    rows = []
    for value in grid:
        weights = PriorWeights(**{"lambda_w": 0.0, "lambda_g": 0.0, "lambda_c": 0.0,
                                  parameter: value})
        point_cfg = dataclasses.replace(scfg, weights=weights)
        point_rows, _ = _solve_rows(cfg, run_id, out_dir, gen, flow, point_cfg,
                                    "anchor", targets, save_images=False,
                                    weights=weights,
                                    trace_tag=f"{parameter}_{value:g}")
        rows.extend(point_rows)
    csv_path = out_dir / "metrics.csv"
    emit_csv(rows, csv_path)
    write_manifest(cfg, "sr_sweep", out_dir / "manifest.txt",
                   extras={"sweep.parameter": parameter,
                           "sweep.grid": " ".join(f"{v:g}" for v in grid)})
    return RunResult("sr_sweep", run_id, str(out_dir), str(csv_path), rows,
                     {"parameter": parameter, "grid": grid})


def cmd_sr_ablate(cfg: ExperimentConfig, out_override: str | None = None) -> RunResult:
    """All pipeline variants under shared seeds; one suite-mean row each."""
    gen = load_generator(cfg)
    flow = load_flow(cfg)
    scfg = solver_config(cfg, gen)
    targets = make_targets(cfg, gen)
    run_id, out_dir = _run_dir(cfg, "sr_ablate", out_override)
    radius = scfg.resolved_radius(gen.latent_dim)
    rows, detail_rows = [], []
    extra: dict = {"variants": list(ALL_VARIANTS), "radius": radius,
                   "anchor_deviation": {}, "w_equals_anchor": {},
                   "data_terms": {}, "density_means": {}}
    for variant in ALL_VARIANTS:
        vrows, results = _solve_rows(cfg, run_id, out_dir, gen, flow, scfg,
                                     variant, targets, save_images=False)
        detail_rows.extend(vrows)
        mean_row = dict(vrows[0])
        for col in ("psnr", "ssim", "ms_ssim_2", "lr_consistency_l1",
                    "density_score", "norm_stat"):
            mean_row[col] = float(np.mean([r[col] for r in vrows]))
        rows.append(mean_row)
        deviations = [float(np.abs(res.wplus - res.anchor).sum(axis=1).max())
                      for res in results]
        extra["anchor_deviation"][variant] = max(deviations)
        extra["w_equals_anchor"][variant] = all(
            np.array_equal(res.wplus, res.anchor) for res in results)
        extra["data_terms"][variant] = [res.data_term for res in results]
        extra["density_means"][variant] = float(np.mean([r["density_score"]
                                                         for r in vrows]))
    csv_path = out_dir / "metrics.csv"
    emit_csv(rows, csv_path)
    emit_csv(detail_rows, out_dir / "details.csv")
    write_manifest(cfg, "sr_ablate", out_dir / "manifest.txt")
    (out_dir / "summary.json").write_text(json.dumps(extra, indent=2))
    return RunResult("sr_ablate", run_id, str(out_dir), str(csv_path), rows, extra)


def cmd_eval_robustness(cfg: ExperimentConfig,
                        out_override: str | None = None) -> RunResult:
    """Full pipeline across the corruption battery (paper parameters)."""
    gen = load_generator(cfg)
    flow = load_flow(cfg)
    scfg = solver_config(cfg, gen)
    targets = make_targets(cfg, gen)
    run_id, out_dir = _run_dir(cfg, "eval_robustness", out_override)
    rows = []
    extra: dict = {"ssim_means": {}}
    for spec in ROBUSTNESS_SPECS:
        srows, _ = _solve_rows(cfg, run_id, out_dir, gen, flow, scfg, "refined",
                               targets, corruption=spec, save_images=(spec == "none"),
                               trace_tag=f"refined_{spec.replace(':', '_')}")
        rows.extend(srows)
        extra["ssim_means"][spec] = float(np.mean([r["ssim"] for r in srows]))
    csv_path = out_dir / "metrics.csv"
    emit_csv(rows, csv_path)
    write_manifest(cfg, "eval_robustness", out_dir / "manifest.txt")
    (out_dir / "summary.json").write_text(json.dumps(extra, indent=2))
    return RunResult("eval_robustness", run_id, str(out_dir), str(csv_path), rows,
                     extra)


def cmd_eval_gaussianization(cfg: ExperimentConfig,
                             out_override: str | None = None) -> RunResult:
    """Squared-norm distribution diagnostics of the trained flow."""
    gen = load_generator(cfg)
    flow = load_flow(cfg)
    report = gaussianization_report(flow, gen, max(5000, cfg.run_images),
                                    derive_seed(cfg.run_seed, "gaussianization"))
    run_id, out_dir = _run_dir(cfg, "eval_gaussianization", out_override)
    write_manifest(cfg, "eval_gaussianization", out_dir / "manifest.txt")
    extra = dataclasses.asdict(report)
    extra["passed"] = report.passed
    (out_dir / "summary.json").write_text(json.dumps(extra, indent=2))
    return RunResult("eval_gaussianization", run_id, str(out_dir), None, [], extra)
