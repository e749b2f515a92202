"""
Command-line entry point for the GVS pipeline.

    python run_experiment.py phantom-gen --seed 0 --size 64x64 --count 200 --amp 0.3 --out data/phantom
    python run_experiment.py train --data data/phantom/manifest.json --out runs/gvs --set train.epochs=20
    python run_experiment.py eval-adice --data runs/gvs_syn/manifest.json --out runs/adice --plot

Config files are JSON objects with one section per config (train, enhance,
adice, phantom); a file for a single-config subcommand may also be the bare
section. `--set section.key=value` overrides any field. Every subcommand
writes config.resolved.json to --out, and `replay` re-runs a subcommand from
that file alone.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import (
    ADiceConfig,
    EnhanceConfig,
    PhantomConfig,
    RunConfig,
    TrainConfig,
    apply_overrides,
    build_config,
)
from .data_pipeline import (
    DatasetManifest,
    ImageGrid,
    LesionMask,
    ManifestEntry,
    Sample,
    load_dataset,
    load_manifest,
    make_phantom,
    read_volume,
    save_manifest,
    write_dataset,
    write_grid,
    write_scaled_grid,
    write_volume,
)
from .enhancement import enhance_samples, run_downstream_grid
from .errors import GVSError, InvalidConfigError, InvalidInputError
from .evaluation import (
    MetricReport,
    adice,
    adice_report,
    identity_report,
    make_counterfeits,
)
from .experiment_runner import ExperimentRunner, configure_logging, write_error
from .experiment_visualizer import ExperimentVisualizer
from .gvs_trainer import resume_state, train_gvs
from .networks import load_generator, synthesize
from .result_analyzer import plot_dice_curves, plot_losses, plot_sweep, report

logger = logging.getLogger(__name__)

CONFIG_MODELS: Dict[str, Type] = {
    "train": TrainConfig,
    "enhance": EnhanceConfig,
    "adice": ADiceConfig,
    "phantom": PhantomConfig,
}


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------

def parse_size(text: str) -> Tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from e


def parse_floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def parse_ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _read_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise InvalidConfigError(f"Config file not found: {path}", path=path) from e
    except json.JSONDecodeError as e:
        raise InvalidConfigError(f"Config file is not valid JSON: {path} ({e})", path=path) from e
    if not isinstance(data, dict):
        raise InvalidConfigError(f"Config file must hold a JSON object: {path}", path=path)
    return data


def resolve_configs(args: argparse.Namespace, names: Sequence[str], defaults: Optional[Dict[str, Dict]] = None) -> Dict[str, Any]:
    """
    Build the named config models for a subcommand.

    Replayed runs take their configs verbatim from config.resolved.json;
    otherwise: defaults < config file section < --set overrides.
    """
    resolved = getattr(args, "resolved_configs", None)
    if resolved:
        return {name: build_config(CONFIG_MODELS[name], resolved.get(name, {})) for name in names}

    file_data = _read_config_file(getattr(args, "config", None))
    sections = {name: dict((defaults or {}).get(name, {})) for name in names}
    if any(name in file_data for name in names):
        unknown = set(file_data) - set(CONFIG_MODELS)
        if unknown:
            raise InvalidConfigError(f"Unknown config sections: {sorted(unknown)}")
        for name in names:
            sections[name].update(file_data.get(name, {}))
    elif file_data:
        if len(names) != 1:
            raise InvalidConfigError(f"Config file must have sections {list(names)} for this subcommand")
        sections[names[0]].update(file_data)

    overrides = list(getattr(args, "set", None) or [])
    by_section = apply_overrides(sections, overrides) if overrides else sections
    unknown = set(by_section) - set(names)
    if unknown:
        raise InvalidConfigError(
            f"Overrides name sections {sorted(unknown)} not used by this subcommand (uses {list(names)})"
        )
    return {name: build_config(CONFIG_MODELS[name], by_section[name]) for name in names}


def _runner(args: argparse.Namespace, configs: Dict[str, Any], seed: int = 0) -> ExperimentRunner:
    arguments = {k: v for k, v in vars(args).items() if k not in ("func", "resolved_configs")}
    visualizer = ExperimentVisualizer(enabled=not args.quiet)
    return ExperimentRunner(args.command, args.out, arguments, configs, seed=seed, visualizer=visualizer).setup()


def _load_samples(path: str, split: Optional[str], workers: int = 1) -> List[Sample]:
    manifest = load_manifest(path)
    samples = list(load_dataset(manifest, split=split, workers=workers))
    if not samples:
        raise InvalidInputError(f"No samples in {path} (split={split})", path=path, split=split)
    logger.info(f"📁 Loaded {len(samples)} samples from {path} (split={split or 'all'})")
    return samples


def _write_image_set(
    out_dir: str,
    ids: Sequence[str],
    images: Sequence[ImageGrid],
    masks: Sequence[LesionMask],
    healthy: Optional[Sequence[Optional[ImageGrid]]] = None,
    splits: Optional[Sequence[str]] = None,
) -> str:
    """Images + masks as a PHANTOM-modality dataset with its manifest."""
    entries = []
    for i, (sample_id, image, mask) in enumerate(zip(ids, images, masks)):
        safe = sample_id.replace("/", "_")
        write_grid(image, os.path.join(out_dir, "images", safe), sample_id)
        write_volume(mask.pixels, os.path.join(out_dir, "masks", safe), sample_id, kind="mask")
        healthy_path = None
        if healthy is not None and healthy[i] is not None:
            healthy_path = os.path.join("healthy", safe)
            write_grid(healthy[i], os.path.join(out_dir, healthy_path), sample_id)
        entries.append(ManifestEntry(
            id=sample_id,
            image=os.path.join("images", safe),
            mask=os.path.join("masks", safe),
            healthy_truth=healthy_path,
            split=splits[i] if splits else "train",
        ))
    manifest = DatasetManifest(modality="PHANTOM", entries=entries, root=out_dir)
    return save_manifest(manifest, os.path.join(out_dir, "manifest.json"))


def _dice_curve_frame(curves) -> pd.DataFrame:
    rows = [
        {"repeat": r, "seed": c.seed, "epoch": e + 1, "dice": v}
        for r, c in enumerate(curves)
        for e, v in enumerate(c.values)
    ]
    return pd.DataFrame(rows, columns=["repeat", "seed", "epoch", "dice"])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_phantom_gen(args: argparse.Namespace) -> Dict[str, Any]:
    defaults = {"phantom": {
        k: v for k, v in {
            "seed": args.seed,
            "height": args.size[0] if args.size else None,
            "width": args.size[1] if args.size else None,
            "count": args.count,
            "lesion_amp": args.amp,
            "lesion_sign": args.sign,
            "max_lesions": args.max_lesions,
            "noise_std": args.noise,
            "test_fraction": args.test_fraction,
        }.items() if v is not None
    }}
    cfg: PhantomConfig = resolve_configs(args, ["phantom"], defaults)["phantom"]
    runner = _runner(args, {"phantom": cfg}, seed=cfg.seed)

    samples = make_phantom(
        cfg.seed, (cfg.height, cfg.width), cfg.count, cfg.lesion_amp,
        lesion_sign=cfg.lesion_sign, max_lesions=cfg.max_lesions, noise_std=cfg.noise_std,
    )
    manifest_path = write_dataset(samples, args.out, modality="PHANTOM", test_fraction=cfg.test_fraction)
    lesion_fraction = float(np.mean([s.mask.pixels.mean() for s in samples]))
    results = {"manifest": manifest_path, "count": len(samples), "lesion_fraction": lesion_fraction}
    runner.write_summary("Phantom dataset", [f"Samples: {len(samples)}", f"Mean lesion fraction: {lesion_fraction:.4f}"])
    runner.finish(results)
    return results


def cmd_train(args: argparse.Namespace) -> Dict[str, Any]:
    cfg: TrainConfig = resolve_configs(args, ["train"])["train"]
    runner = _runner(args, {"train": cfg}, seed=cfg.seed)
    runner.visualizer.show_experiment_header("GVS training", {
        "Data": args.data, "λ": cfg.lambda_, "Epochs": cfg.epochs, "Batch": cfg.batch_size,
        "Difference-aware": cfg.use_difference_aware,
    })

    samples = _load_samples(args.data, args.split, args.workers)
    state = resume_state(args.resume, cfg) if args.resume else None
    state, checkpoints = train_gvs(
        samples, cfg, out_dir=args.out, state=state, progress=not args.quiet, visualizer=runner.visualizer
    )
    if args.plot:
        plot_losses(runner.path("losses.csv"), runner.path("losses.png"))

    last = state.history[-1] if state.history else {}
    results = {
        "epochs": state.epoch,
        "steps": state.step,
        "checkpoints": checkpoints,
        "final_checkpoint": checkpoints[-1] if checkpoints else args.resume,
        "final_losses": last,
    }
    runner.write_summary("GVS training", [f"Epochs: {state.epoch}", f"Steps: {state.step}"] +
                         [f"{k}: {v:.6f}" for k, v in last.items() if k not in ("step", "epoch")])
    runner.finish(results)
    return results


def cmd_synthesize(args: argparse.Namespace) -> Dict[str, Any]:
    runner = _runner(args, {})
    G = load_generator(args.gen)
    samples = _load_samples(args.data, args.split, args.workers)
    outputs = synthesize(G, [s.image for s in samples], batch_size=args.batch_size)

    rows = []
    for sample, x_s in tqdm(list(zip(samples, outputs)), desc="Writing", disable=args.quiet):
        safe = sample.id.replace("/", "_")
        diff = np.abs(sample.image.pixels.astype(np.float64) - x_s.pixels.astype(np.float64))
        write_scaled_grid(diff, runner.path("diff", safe), sample.id)
        rows.append({
            "id": sample.id,
            "image": os.path.join("images", safe),
            "diff": os.path.join("diff", safe),
            "mean_abs_diff": float(diff.mean()),
            "max_abs_diff": float(diff.max()),
        })
    manifest_path = _write_image_set(
        args.out, [s.id for s in samples], outputs, [s.mask for s in samples],
        healthy=[s.healthy_truth for s in samples],
    )
    runner.save_frame("index.csv", pd.DataFrame(rows))
    results = {"count": len(rows), "manifest": manifest_path, "index": runner.path("index.csv")}
    runner.finish(results)
    return results


def cmd_enhance(args: argparse.Namespace) -> Dict[str, Any]:
    cfg: EnhanceConfig = resolve_configs(args, ["enhance"])["enhance"]
    runner = _runner(args, {"enhance": cfg})
    G = load_generator(args.gen)
    samples = _load_samples(args.data, args.split, args.workers)
    enhanced = enhance_samples(samples, G, args.alpha, cfg, batch_size=args.batch_size)
    manifest_path = _write_image_set(args.out, [s.id for s in samples], enhanced, [s.mask for s in samples])
    results = {"count": len(enhanced), "alpha": args.alpha, "sign_mode": cfg.sign_mode, "manifest": manifest_path}
    runner.finish(results)
    return results


def cmd_downstream(args: argparse.Namespace) -> Dict[str, Any]:
    configs = resolve_configs(args, ["train", "enhance"])
    seg_cfg: TrainConfig = configs["train"]
    enhance_cfg: EnhanceConfig = configs["enhance"]
    runner = _runner(args, configs, seed=seg_cfg.seed)

    G = load_generator(args.gen)
    manifest = load_manifest(args.data)
    train = list(load_dataset(manifest, split="train", workers=args.workers))
    test = list(load_dataset(manifest, split="test", workers=args.workers))
    if not train or not test:
        raise InvalidInputError(
            f"downstream needs train and test splits in {args.data}, got {len(train)}/{len(test)}"
        )
    alphas = args.alphas or enhance_cfg.alpha_grid
    seeds = args.seeds or [seg_cfg.seed]

    rows = []
    for seed in tqdm(seeds, desc="Downstream seeds", disable=args.quiet):
        cfg_seed = seg_cfg.model_copy(update={"seed": seed})
        for result in run_downstream_grid(train, test, G, cfg_seed, enhance_cfg, alphas, args.train_fraction):
            rows.append({
                "alpha": result.alpha,
                "mean_dice": result.mean_dice,
                "delta_vs_baseline": result.delta_vs_baseline,
                "seed": seed,
            })
    frame = pd.DataFrame(rows, columns=["alpha", "mean_dice", "delta_vs_baseline", "seed"])
    runner.save_frame("results.csv", frame)
    runner.visualizer.show_metric_table("Downstream segmentation", rows)
    results = {"rows": rows, "csv": runner.path("results.csv")}
    runner.finish(results)
    return results


def cmd_eval_identity(args: argparse.Namespace) -> Dict[str, Any]:
    runner = _runner(args, {})
    G = load_generator(args.gen)
    samples = _load_samples(args.data, args.split, args.workers)
    metric = identity_report(G, samples, batch_size=args.batch_size)
    metric.config_hash = runner.config_hash
    runner.save_json("report.json", metric.model_dump(mode="json"))
    runner.visualizer.show_metric_table("Identity", [{"MPSNR": metric.mpsnr, "MSSIM": metric.mssim, "images": metric.n_images}])
    results = {"mpsnr": metric.mpsnr, "mssim": metric.mssim, "n_images": metric.n_images}
    runner.finish(results)
    return results


def _list_container_dirs(root: str) -> List[str]:
    return sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if os.path.isfile(os.path.join(root, d, "meta.json"))
    )


def _load_image_mask_dirs(images_dir: str, masks_dir: str) -> Tuple[List[ImageGrid], List[LesionMask]]:
    image_dirs, mask_dirs = _list_container_dirs(images_dir), _list_container_dirs(masks_dir)
    names = [os.path.basename(p) for p in image_dirs]
    if names != [os.path.basename(p) for p in mask_dirs]:
        raise InvalidInputError(f"{images_dir} and {masks_dir} do not hold the same entries")
    images, masks = [], []
    for image_dir, mask_dir in zip(image_dirs, mask_dirs):
        image, _ = read_volume(image_dir)
        mask, _ = read_volume(mask_dir)
        images.extend(ImageGrid(np.clip(image[k], 0.0, 1.0).astype(np.float32)) for k in range(image.shape[0]))
        masks.extend(LesionMask(mask[k]) for k in range(mask.shape[0]))
    if not images:
        raise InvalidInputError(f"No images found in {images_dir}")
    return images, masks


def _write_adice_outputs(runner: ExperimentRunner, metric: MetricReport, label: str, plot: bool) -> None:
    metric.config_hash = runner.config_hash
    runner.save_json("report.json", metric.model_dump(mode="json"))
    runner.save_frame("curves.csv", _dice_curve_frame(metric.dice_curves))
    if plot:
        plot_dice_curves({label: metric.dice_curves}, runner.path("curves.png"))


def cmd_eval_adice(args: argparse.Namespace) -> Dict[str, Any]:
    cfg: ADiceConfig = resolve_configs(args, ["adice"])["adice"]
    runner = _runner(args, {"adice": cfg})
    if args.data:
        samples = _load_samples(args.data, args.split, args.workers)
        images = [s.healthy_truth if args.use_healthy_truth else s.image for s in samples]
        if any(img is None for img in images):
            raise InvalidInputError("--use-healthy-truth needs healthy_truth for every entry")
        masks = [s.mask for s in samples]
    elif args.images and args.masks:
        images, masks = _load_image_mask_dirs(args.images, args.masks)
    else:
        raise InvalidInputError("eval-adice needs --data or both --images and --masks")

    metric = adice_report(images, masks, cfg, progress=not args.quiet)
    _write_adice_outputs(runner, metric, args.label or "images", args.plot)
    runner.visualizer.show_metric_table("A-Dice", [
        {"repeat": i, "seed": c.seed, "adice": c.adice} for i, c in enumerate(metric.dice_curves)
    ])
    for failure in metric.failed_repeats:
        runner.visualizer.show_status(f"A-Dice repeat seed {failure.seed} aborted: {failure.error}", success=False)
    results = {
        "adice": metric.adice,
        "adice_repeats": metric.adice_repeats,
        "failed_repeat_seeds": [f.seed for f in metric.failed_repeats],
    }
    runner.finish(results)
    return results


def cmd_eval_counterfeit(args: argparse.Namespace) -> Dict[str, Any]:
    cfg: ADiceConfig = resolve_configs(args, ["adice"])["adice"]
    runner = _runner(args, {"adice": cfg}, seed=args.seed)
    samples = _load_samples(args.data, args.split, args.workers)
    counterfeits = make_counterfeits(samples, args.mode, seed=args.seed)
    masks = [s.mask for s in samples]

    metric = adice_report(counterfeits, masks, cfg, progress=not args.quiet)
    metric.metadata["mode"] = args.mode
    if all(s.healthy_truth is not None for s in samples) and not args.skip_reference:
        reference, _ = adice([s.healthy_truth for s in samples], masks, cfg)
        metric.metadata["healthy_truth_adice"] = reference
        metric.metadata["margin_vs_healthy"] = metric.adice - reference
    if args.save_images:
        _write_image_set(runner.path("counterfeits"), [s.id for s in samples], counterfeits, masks)
    _write_adice_outputs(runner, metric, args.mode, args.plot)
    results = {"mode": args.mode, "adice": metric.adice, **metric.metadata}
    runner.finish(results)
    return results


def _dedupe(values: Sequence[float]) -> List[float]:
    unique: List[float] = []
    for v in values:
        if v in unique:
            logger.warning(f"⚠️  Duplicate λ={v} ignored")
            continue
        unique.append(v)
    return unique


def cmd_sweep_lambda(args: argparse.Namespace) -> Dict[str, Any]:
    configs = resolve_configs(args, ["train", "adice"])
    base: TrainConfig = configs["train"]
    adice_cfg: ADiceConfig = configs["adice"]
    runner = _runner(args, configs, seed=base.seed)

    lambdas = _dedupe(args.lambdas)
    if not lambdas:
        raise InvalidInputError("sweep-lambda needs at least one λ")
    manifest = load_manifest(args.data)
    train = list(load_dataset(manifest, split="train", workers=args.workers))
    evaluation = list(load_dataset(manifest, split=args.eval_split, workers=args.workers)) or train
    if not train:
        raise InvalidInputError(f"No training samples in {args.data}")

    rows = []
    for lam in tqdm(lambdas, desc="λ sweep", disable=args.quiet):
        arm_dir = runner.path(f"lambda_{lam:g}")
        row: Dict[str, Any] = {"lambda": lam, "mpsnr": None, "mssim": None, "adice": None, "status": "ok", "error": ""}
        try:
            cfg = base.model_copy(update={"lambda_": lam})
            state, _ = train_gvs(train, cfg, out_dir=arm_dir)
            identity = identity_report(state.G, evaluation)
            syn = synthesize(state.G, [s.image for s in evaluation])
            scored = adice_report(syn, [s.mask for s in evaluation], adice_cfg)
            value = scored.adice
            arm_report = identity.model_copy(update={
                "adice": value,
                "adice_repeats": scored.adice_repeats,
                "dice_curves": scored.dice_curves,
                "failed_repeats": scored.failed_repeats,
                "config_hash": runner.config_hash,
                "metadata": {**identity.metadata, "lambda": lam},
            })
            with open(os.path.join(arm_dir, "report.json"), "w") as f:
                json.dump(arm_report.model_dump(mode="json"), f, indent=2)
            row.update({"mpsnr": identity.mpsnr, "mssim": identity.mssim, "adice": value})
        except Exception as e:
            logger.error(f"❌ λ={lam} failed: {e}", exc_info=True)
            runner.visualizer.show_status(f"λ={lam:g} failed: {e}", success=False)
            row.update({"status": "failed", "error": str(e)})
        rows.append(row)

    frame = pd.DataFrame(rows, columns=["lambda", "mpsnr", "mssim", "adice", "status", "error"])
    runner.save_frame("sweep.csv", frame)
    if args.plot and (frame["status"] == "ok").any():
        plot_sweep(frame, runner.path("sweep.png"))
    runner.visualizer.show_metric_table("λ sweep", rows, ["lambda", "mpsnr", "mssim", "adice", "status"], phase="sweep")
    results = {"rows": rows, "csv": runner.path("sweep.csv")}
    runner.finish(results)
    return results


def cmd_report(args: argparse.Namespace) -> Dict[str, Any]:
    runner = _runner(args, {})
    frame = report(args.run_dirs, args.out, plot=args.plot)
    runner.visualizer.show_metric_table(
        "Summary", frame.to_dict("records"), ["run", "mpsnr", "mssim", "adice_mean", "adice_std", "flagged"], phase="report"
    )
    results = {"rows": json.loads(frame.to_json(orient="records")), "flagged": int(frame["flagged"].sum())}
    runner.finish(results)
    return results


def cmd_replay(args: argparse.Namespace) -> Dict[str, Any]:
    """Re-run a subcommand from its config.resolved.json."""
    with open(args.resolved, "r") as f:
        run_config = RunConfig.model_validate(json.load(f))
    if run_config.subcommand not in HANDLERS or run_config.subcommand == "replay":
        raise InvalidConfigError(f"Cannot replay subcommand {run_config.subcommand!r}")
    replayed = argparse.Namespace(**run_config.arguments)
    replayed.command = run_config.subcommand
    replayed.resolved_configs = run_config.configs
    if args.out:
        replayed.out = args.out
    replayed.quiet = args.quiet
    logger.info(f"🔄 Replaying {run_config.subcommand} (config {run_config.config_hash[:12]}) -> {replayed.out}")
    return HANDLERS[run_config.subcommand](replayed)


HANDLERS: Dict[str, Callable[[argparse.Namespace], Dict[str, Any]]] = {
    "phantom-gen": cmd_phantom_gen,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "enhance": cmd_enhance,
    "downstream": cmd_downstream,
    "eval-identity": cmd_eval_identity,
    "eval-adice": cmd_eval_adice,
    "eval-counterfeit": cmd_eval_counterfeit,
    "sweep-lambda": cmd_sweep_lambda,
    "report": cmd_report,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Generator-versus-Segmentor pseudo-healthy synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, out_required: bool = True,
            out_help: str = "Output directory (created if missing)") -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=out_required, help=out_help)
        p.add_argument("--quiet", action="store_true", help="Disable console tables and progress bars")
        return p

    def add_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="Override a config field, e.g. train.lambda_=5 (repeatable)")

    def add_data(p: argparse.ArgumentParser, split_default: Optional[str] = None) -> None:
        p.add_argument("--data", "--in", dest="data", required=True, help="Dataset manifest.json")
        p.add_argument("--split", choices=["train", "test"], default=split_default)
        p.add_argument("--workers", type=int, default=1, help="Parallel volume loaders")

    p = add("phantom-gen", "Generate a deterministic phantom dataset")
    add_config(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=parse_size, help="HxW, e.g. 64x64")
    p.add_argument("--count", type=int)
    p.add_argument("--amp", type=float, help="Lesion intensity shift in [0,1]")
    p.add_argument("--sign", type=int, choices=[1, -1], help="Lesion polarity (+1 bright, -1 dark)")
    p.add_argument("--max-lesions", dest="max_lesions", type=int)
    p.add_argument("--noise", type=float, help="Anatomy noise std")
    p.add_argument("--test-fraction", dest="test_fraction", type=float)

    p = add("train", "Train GVS (alternating Step A / Step B)")
    add_config(p)
    add_data(p, split_default="train")
    p.add_argument("--resume", help="Epoch checkpoint to resume from")
    p.add_argument("--plot", action="store_true", help="Write losses.png")

    p = add("synthesize", "Write G(x_p) and |x_p - G(x_p)| for every sample")
    add_data(p)
    p.add_argument("--gen", required=True, help="Checkpoint holding the generator")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)

    p = add("enhance", "Write lesion-contrast enhanced images")
    add_config(p)
    add_data(p)
    p.add_argument("--gen", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)

    p = add("downstream", "Train segmentors on enhanced images for each alpha",
            out_help="Run directory (created if missing); the dice table goes to results.csv inside it")
    add_config(p)
    p.add_argument("--data", "--in", dest="data", required=True, help="Manifest with train and test splits")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--gen", required=True)
    p.add_argument("--alphas", type=parse_floats)
    p.add_argument("--seeds", type=parse_ints)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=1.0)

    p = add("eval-identity", "Masked PSNR/SSIM of G(x_p) against x_p")
    add_data(p)
    p.add_argument("--gen", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)

    p = add("eval-adice", "A-Dice healthiness of a set of images")
    add_config(p)
    p.add_argument("--data", "--in", dest="data", help="Manifest (alternative to --images/--masks)")
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--images", help="Directory of image containers")
    p.add_argument("--masks", help="Directory of mask containers (same names as --images)")
    p.add_argument("--use-healthy-truth", dest="use_healthy_truth", action="store_true",
                   help="Score the manifest's healthy_truth images instead of its images")
    p.add_argument("--label", help="Curve label for plots")
    p.add_argument("--plot", action="store_true", help="Write curves.png")

    p = add("eval-counterfeit", "A-Dice of counterfeit images (lesions mean- or noise-filled)")
    add_config(p)
    add_data(p)
    p.add_argument("--mode", choices=["meanfill", "noisefill"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-reference", dest="skip_reference", action="store_true",
                   help="Do not compute the healthy-truth reference A-Dice")
    p.add_argument("--save-images", dest="save_images", action="store_true")
    p.add_argument("--plot", action="store_true")

    p = add("sweep-lambda", "Train and evaluate GVS for several λ values")
    add_config(p)
    p.add_argument("--data", "--in", dest="data", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--lambdas", type=parse_floats, required=True)
    p.add_argument("--eval-split", dest="eval_split", choices=["train", "test"], default="test")
    p.add_argument("--plot", action="store_true")

    p = add("report", "Consolidate report.json files into a summary table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--plot", action="store_true")

    p = add("replay", "Re-run a subcommand from config.resolved.json", out_required=False)
    p.add_argument("resolved", help="Path to config.resolved.json")

    for name, handler in HANDLERS.items():
        sub.choices[name].set_defaults(func=handler)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except GVSError as e:
        logger.error(f"❌ {type(e).__name__}: {e.message}")
        return write_error(e)
    except Exception as e:
        logger.error(f"❌ Unexpected failure: {e}", exc_info=True)
        return write_error(e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
