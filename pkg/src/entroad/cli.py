"""Command-line entry point.

Subcommands: synth | train | infer | eval | entropy | route | sweep |
grad-check. Configuration comes from a TOML file plus flag overrides
(flags win); ENTROAD_SEED overrides the seed last. Exit codes: 0 ok,
1 usage error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .bundle import read_bundle, write_bundle
from .config import TrainConfig, config_from_dict
from .entropy import compute_entropy_map
from .errors import ConfigError, DataError, EntroadError, NumericalError
from .inference import PRIORS, infer
from .maps import save_heatmap_png
from .memory import patch_evidence, project_patches
from .metrics import evaluate
from .model import load_model, save_model
from .routing import RoutingConfig, route_features
from .synthetic import SyntheticConfig, gen_synthetic
from .training import grad_check, train, write_history_csv

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml


class UsageError(EntroadError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SyntheticConfig)}


def _load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return _toml.load(fh)


def _split_config(path) -> tuple[dict, dict]:
    """TOML top level maps to TrainConfig keys; [synth] holds generator keys."""
    if path is None:
        return {}, {}
    data = _load_toml(path)
    synth = data.pop("synth", {})
    unknown = set(synth) - _SYNTH_FIELDS
    if unknown:
        raise ConfigError(f"unknown [synth] keys: {sorted(unknown)}")
    return data, synth


def _resolve_train_config(args, file_data: dict) -> TrainConfig:
    overrides = {}
    for field in dataclasses.fields(TrainConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            overrides[field.name] = value
    merged = dict(file_data)
    merged.update(overrides)
    env_seed = os.environ.get("ENTROAD_SEED")
    if env_seed is not None:
        merged["seed"] = int(env_seed)
    return config_from_dict(merged)


def _resolve_synth_config(args, synth_data: dict) -> SyntheticConfig:
    merged = dict(synth_data)
    for name in _SYNTH_FIELDS:
        value = getattr(args, f"synth_{name}", None)
        if value is not None:
            merged[name] = value
    if "grid" in merged and not isinstance(merged["grid"], tuple):
        merged["grid"] = tuple(merged["grid"])
    env_seed = os.environ.get("ENTROAD_SEED")
    if env_seed is not None:
        merged["seed"] = int(env_seed)
    cfg = SyntheticConfig(**merged)
    cfg.validate()
    return cfg


def _add_hyperparameter_flags(parser: argparse.ArgumentParser) -> None:
    """Every pipeline hyperparameter, with its reference default in the help."""
    group = parser.add_argument_group("hyperparameters (defaults shown)")
    group.add_argument("--lr", type=float, help="Adam learning rate [default 4e-4]")
    group.add_argument("--batch-size", dest="batch_size", type=int, help="batch size [default 8]")
    group.add_argument("--epochs-stage1", dest="epochs_stage1", type=int, help="stage-1 epochs [default 1]")
    group.add_argument("--epochs-stage2", dest="epochs_stage2", type=int, help="stage-2 epochs [default 5]")
    group.add_argument("--seed", type=int, help="training seed [default 0]")
    group.add_argument("--layers", type=_int_list, help="entropy/feature layer ids [default 6,12,18,24]")
    group.add_argument("--map-layers", dest="map_layers", type=_int_list, help="alignment layer ids [default = --layers]")
    group.add_argument("--agg-layer", dest="agg_layer", type=int, help="token aggregation layer [default deepest]")
    group.add_argument("--d-r", dest="d_r", type=int, help="retrieval projection width [default 768]")
    group.add_argument("--d-t", dest="d_t", type=int, help="text embedding width [default 768]")
    group.add_argument("--n-context", dest="n_context", type=int, help="learnable context tokens [default 12]")
    group.add_argument("--m-patches", dest="m_patches", type=int, help="patch prototypes [default 512]")
    group.add_argument("--m-images", dest="m_images", type=int, help="image prototypes [default 64]")
    group.add_argument("--quantile", type=float, help="similarity filter quantile [default 0.9]")
    group.add_argument("--temperature", type=float, help="router temperature T [default 0.1]")
    group.add_argument("--tau", type=float, help="gate threshold tau [default 0.5]")
    group.add_argument("--k0", type=float, help="gate steepness k0 [default 5.0]")
    group.add_argument("--k1", type=float, help="gate entropy steepness k1 [default 50.0]")
    group.add_argument("--gate-enabled", dest="gate_enabled", type=_bool_flag, help="confidence gate on/off [default true]")
    group.add_argument("--tau-s", dest="tau_s", type=float, help="similarity logit temperature [default 0.07]")
    group.add_argument("--alpha-f", dest="alpha_f", type=float, help="focal class balance [default 0.25]")
    group.add_argument("--gamma", type=float, help="focal focusing power [default 2.0]")
    group.add_argument("--lambda-d", dest="lambda_d", type=float, help="Dice weight [default 1.0]")
    group.add_argument("--lambda-a", dest="lambda_a", type=float, help="branch A loss weight [default 0.7]")
    group.add_argument("--lambda-b", dest="lambda_b", type=float, help="branch B loss weight [default 0.3]")
    group.add_argument("--sigma", type=float, help="Gaussian smoothing sigma [default 4]")
    group.add_argument("--top-fraction", dest="top_fraction", type=float, help="top pixel fraction for a_loc [default 0.01]")
    group.add_argument("--score-balance", dest="score_balance", type=float, help="retrieval weight k in the image score [default 0.7]")
    group.add_argument("--alpha-structured", dest="alpha_structured", type=float, help="branch A fusion weight, structured prior [default 0.7]")
    group.add_argument("--beta-structured", dest="beta_structured", type=float, help="branch B fusion weight, structured prior [default 0.3]")
    group.add_argument("--alpha-diffuse", dest="alpha_diffuse", type=float, help="branch A fusion weight, diffuse prior [default 0.3]")
    group.add_argument("--beta-diffuse", dest="beta_diffuse", type=float, help="branch B fusion weight, diffuse prior [default 0.7]")


def _add_synth_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("synthetic data")
    group.add_argument("--n-images", dest="synth_n_images", type=int, help="images to generate [default 200]")
    group.add_argument("--patch-grid", dest="synth_grid", type=_int_pair, help="patch grid h,w [default 8,8]")
    group.add_argument("--d", dest="synth_d", type=int, help="feature width [default 16]")
    group.add_argument("--anomaly-fraction", dest="synth_anomaly_fraction", type=float, help="anomalous share [default 0.5]")
    group.add_argument("--blob-radius", dest="synth_blob_radius", type=int, help="blob radius in patches [default 2]")
    group.add_argument("--feature-shift", dest="synth_feature_shift", type=float, help="blob feature shift [default 2.0]")
    group.add_argument("--attention-disruption", dest="synth_attention_disruption", type=float, help="blend toward uniform attention [default 0.8]")
    group.add_argument("--synth-seed", dest="synth_seed", type=int, help="generator seed [default 0]")


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _int_pair(text: str) -> tuple[int, int]:
    parts = _int_list(text)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated integers")
    return parts[0], parts[1]


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _bool_flag(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _read_bundle_dir(path) -> list:
    files = sorted(Path(path).glob("*.eadb"))
    if not files:
        raise DataError(f"no .eadb bundles under {path}")
    return [read_bundle(f) for f in files]


def build_parser() -> _Parser:
    parser = _Parser(prog="entroad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate synthetic bundles", description="Generate synthetic feature bundles plus a manifest.")
    p_synth.add_argument("--config", type=Path, help="TOML config with an optional [synth] table")
    p_synth.add_argument("--out-dir", type=Path, required=True)
    _add_synth_flags(p_synth)

    p_train = sub.add_parser(
        "train",
        help="run both training stages",
        description="Train on a directory of labeled bundles and write a checkpoint plus a loss-history CSV.",
    )
    p_train.add_argument("--config", type=Path)
    p_train.add_argument("--data-dir", type=Path, required=True)
    p_train.add_argument("--out-ckpt", type=Path, required=True)
    p_train.add_argument("--out-history", type=Path, help="defaults to <out-ckpt stem>_history.csv")
    _add_hyperparameter_flags(p_train)

    p_infer = sub.add_parser("infer", help="score bundles with a trained model")
    p_infer.add_argument("--model", type=Path, required=True)
    p_infer.add_argument("--bundle", type=Path, help="single bundle file")
    p_infer.add_argument("--bundle-dir", type=Path, help="batch over a directory of bundles")
    p_infer.add_argument("--prior", choices=PRIORS, default="structured")
    p_infer.add_argument("--out-map", type=Path, help="grayscale PNG of the fused map (single mode)")
    p_infer.add_argument("--out-json", type=Path, help="score JSON (single mode)")
    p_infer.add_argument("--out-dir", type=Path, help="per-image .json/.npy outputs (batch mode)")
    p_infer.add_argument("--no-gate", action="store_true", help="disable the confidence gate (ablation)")
    p_infer.add_argument("--threads", type=int, default=None, help="parallel images [default: cpu count]")
    p_infer.add_argument("--text-table", type=Path, help="precomputed prompt embeddings (EATX) instead of the toy encoder")
    p_infer.add_argument("--prompt-normal", default="a photo of a normal object", help="table key for the normal prompt")
    p_infer.add_argument("--prompt-anomaly", default="a photo of a damaged object", help="table key for the anomaly prompt")

    p_eval = sub.add_parser("eval", help="evaluate predictions against bundles")
    p_eval.add_argument("--pred-dir", type=Path, required=True)
    p_eval.add_argument("--bundle-dir", type=Path, required=True)
    p_eval.add_argument("--out", type=Path, required=True)

    p_entropy = sub.add_parser("entropy", help="dump the normalized entropy heatmap of a bundle")
    p_entropy.add_argument("--bundle", type=Path, required=True)
    p_entropy.add_argument("--out", type=Path, required=True)
    p_entropy.add_argument("--layers", type=_int_list, help="layer subset [default: all bundle layers]")

    p_route = sub.add_parser("route", help="print routing weights and the gate for a bundle")
    p_route.add_argument("--bundle", type=Path, required=True)
    p_route.add_argument("--model", type=Path, help="checkpoint for real patch evidence; without it p=0.5")
    p_route.add_argument("--temperature", type=float, default=0.1)
    p_route.add_argument("--tau", type=float, default=0.5)
    p_route.add_argument("--k0", type=float, default=5.0)
    p_route.add_argument("--k1", type=float, default=50.0)

    p_sweep = sub.add_parser("sweep", help="metric curves over a hyperparameter grid (synthetic data)")
    p_sweep.add_argument("--config", type=Path)
    p_sweep.add_argument("--param", choices=("alpha_beta", "lambda", "T"), required=True)
    p_sweep.add_argument("--grid", type=_float_list, required=True, help="comma-separated values")
    p_sweep.add_argument("--out-csv", type=Path, required=True)
    p_sweep.add_argument("--train-per-point", action="store_true")
    p_sweep.add_argument("--eval-images", type=int, default=60)
    _add_hyperparameter_flags(p_sweep)
    _add_synth_flags(p_sweep)

    p_gc = sub.add_parser("grad-check", help="verify training gradients against finite differences")
    p_gc.add_argument("--config", type=Path)
    p_gc.add_argument("--model", type=Path, help="checkpoint to check; default: fresh toy model")
    p_gc.add_argument("--data-dir", type=Path, help="bundles for the check batch; default: toy synthetic")
    p_gc.add_argument("--h", type=float, default=1e-5)
    p_gc.add_argument("--max-coords", dest="max_coords", type=int, default=200)
    p_gc.add_argument("--perturb", type=float, default=0.05, help="seeded noise on trainables so gradients are generic")
    _add_hyperparameter_flags(p_gc)

    return parser


# -- command implementations -------------------------------------------------


def cmd_synth(args) -> int:
    _, synth_data = _split_config(args.config)
    cfg = _resolve_synth_config(args, synth_data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundles = gen_synthetic(cfg)
    entries = []
    for bundle in bundles:
        name = f"{bundle.image_id}.eadb"
        write_bundle(bundle, out_dir / name)
        entries.append({"file": name, "image_id": bundle.image_id, "label": bundle.label})
    manifest = {
        "synth": dataclasses.asdict(cfg),
        "n_images": cfg.n_images,
        "files": entries,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {len(entries)} bundles to {out_dir}")
    return 0


def cmd_train(args) -> int:
    file_data, _ = _split_config(args.config)
    cfg = _resolve_train_config(args, file_data)
    bundles = _read_bundle_dir(args.data_dir)
    model, history = train(bundles, cfg)
    out_ckpt = Path(args.out_ckpt)
    out_ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out_ckpt, config_hash=cfg.hash())
    out_history = args.out_history or out_ckpt.with_name(out_ckpt.stem + "_history.csv")
    write_history_csv(history, out_history, cfg.hash())
    print(f"checkpoint: {out_ckpt}")
    print(f"history:    {out_history}")
    print(f"config:     {cfg.hash()}")
    return 0


def _result_json(result, config_hash: str) -> dict:
    return {
        "image_id": result.image_id,
        "score": result.score,
        "a_loc": result.a_loc,
        "a_ret": result.a_ret,
        "gate": result.gate,
        "config_hash": config_hash,
    }


def cmd_infer(args) -> int:
    if (args.bundle is None) == (args.bundle_dir is None):
        raise UsageError("provide exactly one of --bundle / --bundle-dir")
    model = load_model(args.model)
    config_hash = model.config.hash()
    gate_enabled = False if args.no_gate else None
    prompt_ids = None
    if args.text_table is not None:
        from .prompt import TextEncoderSpec, read_text_table

        model = dataclasses.replace(
            model, text=TextEncoderSpec(mode="precomputed", table=read_text_table(args.text_table))
        )
        prompt_ids = (args.prompt_normal, args.prompt_anomaly)

    if args.bundle is not None:
        bundle = read_bundle(args.bundle)
        result = infer(bundle, model, prior=args.prior, gate_enabled=gate_enabled, prompt_ids=prompt_ids)
        payload = _result_json(result, config_hash)
        if args.out_map is not None:
            save_heatmap_png(result.map, args.out_map)
        if args.out_json is not None:
            with open(args.out_json, "w") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)
        print(json.dumps(payload, sort_keys=True))
        return 0

    bundles = _read_bundle_dir(args.bundle_dir)
    out_dir = args.out_dir
    if out_dir is None:
        raise UsageError("--bundle-dir requires --out-dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = args.threads or (os.cpu_count() or 1)

    def _run(bundle):
        return infer(bundle, model, prior=args.prior, gate_enabled=gate_enabled, prompt_ids=prompt_ids)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(_run, bundles))  # order fixed by submission
    for result in results:
        np.save(out_dir / f"{result.image_id}.npy", result.map.astype(np.float32))
        with open(out_dir / f"{result.image_id}.json", "w") as fh:
            json.dump(_result_json(result, config_hash), fh, indent=2, sort_keys=True)
    print(f"wrote {len(results)} predictions to {out_dir}")
    return 0


class _LoadedPrediction:
    def __init__(self, image_id, score, map_arr):
        self.image_id = image_id
        self.score = score
        self.map = map_arr


def cmd_eval(args) -> int:
    bundles = _read_bundle_dir(args.bundle_dir)
    pred_dir = Path(args.pred_dir)
    results = []
    hashes = set()
    for bundle in bundles:
        json_path = pred_dir / f"{bundle.image_id}.json"
        map_path = pred_dir / f"{bundle.image_id}.npy"
        if not json_path.exists() or not map_path.exists():
            raise DataError(f"missing prediction for {bundle.image_id} under {pred_dir}")
        with open(json_path) as fh:
            payload = json.load(fh)
        hashes.add(payload.get("config_hash"))
        results.append(
            _LoadedPrediction(bundle.image_id, float(payload["score"]), np.load(map_path))
        )
    report = evaluate(results, bundles)
    doc = report.to_dict()
    doc["config_hash"] = hashes.pop() if len(hashes) == 1 else None
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(json.dumps(doc["percent"], sort_keys=True))
    return 0


def cmd_entropy(args) -> int:
    bundle = read_bundle(args.bundle)
    layers = args.layers if args.layers else list(bundle.layers)
    emap = compute_entropy_map(bundle, layers)
    save_heatmap_png(emap.normalized.reshape(bundle.grid), args.out)
    print(f"entropy heatmap ({bundle.grid[0]}x{bundle.grid[1]}) -> {args.out}")
    return 0


def cmd_route(args) -> int:
    bundle = read_bundle(args.bundle)
    emap = compute_entropy_map(bundle, list(bundle.layers))
    if args.model is not None:
        model = load_model(args.model)
        r = project_patches(bundle, model.projections, model.projections.evidence_layer)
        p = patch_evidence(np.asarray(r), model.bank)
    else:
        p = np.full(bundle.n_patches, 0.5)
    cfg = RoutingConfig(temperature=args.temperature, tau=args.tau, k0=args.k0, k1=args.k1)
    z = bundle.features[bundle.layers[-1]].astype(np.float64)
    tokens = route_features(z, p, emap.normalized, cfg)
    summary = {
        "image_id": bundle.image_id,
        "gate": float(tokens.g),
        "p_max": float(p.max()),
        "entropy_std": float(emap.normalized.std()),
        "w_a": {"max": float(np.max(tokens.w_a)), "entropy": float(-(tokens.w_a * np.log(tokens.w_a + 1e-12)).sum())},
        "w_n": {"max": float(np.max(tokens.w_n)), "entropy": float(-(tokens.w_n * np.log(tokens.w_n + 1e-12)).sum())},
        "evidence": "model" if args.model is not None else "uninformative (p=0.5)",
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    file_data, synth_data = _split_config(args.config)
    cfg = _resolve_train_config(args, file_data)
    synth_cfg = _resolve_synth_config(args, synth_data)
    if not args.grid:
        raise UsageError("empty sweep grid")
    if args.param == "lambda" and not args.train_per_point:
        raise UsageError("sweeping lambda changes training; pass --train-per-point")

    train_bundles = gen_synthetic(synth_cfg)
    eval_cfg = dataclasses.replace(synth_cfg, n_images=args.eval_images, seed=synth_cfg.seed + 1)
    eval_bundles = gen_synthetic(eval_cfg)

    model = None
    if not args.train_per_point:
        model, _ = train(train_bundles, cfg)

    rows = []
    for value in args.grid:
        point_cfg = dataclasses.replace(cfg)
        if args.param == "alpha_beta":
            point_cfg = dataclasses.replace(
                cfg, alpha_structured=value, beta_structured=1.0 - value
            )
        elif args.param == "lambda":
            point_cfg = dataclasses.replace(cfg, lambda_a=value, lambda_b=1.0 - value)
        elif args.param == "T":
            point_cfg = dataclasses.replace(cfg, temperature=value)

        if args.train_per_point:
            point_model, _ = train(train_bundles, point_cfg)
        else:
            point_model = dataclasses.replace(model, config=point_cfg)
        results = [infer(b, point_model, prior="structured") for b in eval_bundles]
        report = evaluate(results, eval_bundles)
        rows.append((value, report))

    with open(args.out_csv, "w") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n")
        fh.write("param,value,image_auroc,image_ap,pixel_auroc,aupro\n")
        for value, report in rows:
            fh.write(
                f"{args.param},{value:g},{report.image_auroc:.6f},{report.image_ap:.6f},"
                f"{report.pixel_auroc:.6f},{report.aupro:.6f}\n"
            )
    print(f"wrote {len(rows)} sweep rows to {args.out_csv}")
    return 0


def cmd_grad_check(args) -> int:
    file_data, _ = _split_config(args.config)
    cfg = _resolve_train_config(args, file_data)
    if args.model is not None:
        model = load_model(args.model)
    else:
        toy = gen_synthetic(
            SyntheticConfig(n_images=8, grid=(2, 2), d=6, anomaly_fraction=0.5, blob_radius=1, seed=cfg.seed)
        )
        toy_cfg = dataclasses.replace(cfg, epochs_stage1=1, epochs_stage2=1)
        model, _ = train(toy, toy_cfg)
    if args.data_dir is not None:
        batch = _read_bundle_dir(args.data_dir)[:2]
    else:
        batch = gen_synthetic(
            SyntheticConfig(n_images=2, grid=(2, 2), d=model.d, anomaly_fraction=0.5, blob_radius=1, seed=cfg.seed + 7)
        )
    if args.perturb:
        rng = np.random.default_rng(cfg.seed)
        for arr in (
            model.learner.context,
            model.adapter_a.b1, model.adapter_a.w2, model.adapter_a.b2,
            model.adapter_b.b1, model.adapter_b.w2, model.adapter_b.b2,
        ):
            arr += args.perturb * rng.normal(size=arr.shape).astype(arr.dtype)
    report = grad_check(model, batch, h=args.h, max_coords=args.max_coords, seed=cfg.seed)
    print(f"checked {len(report.rows)} coordinates; max rel err = {report.max_rel_err:.3e}")
    for row in report.worst(5):
        print(
            f"  {row.param}{row.coord}: analytic={row.analytic:.6e} "
            f"fd={row.numeric:.6e} rel={row.rel_err:.3e}"
        )
    if not np.isfinite(report.max_rel_err) or report.max_rel_err >= 1e-3:
        raise NumericalError(f"gradient check failed: max rel err {report.max_rel_err:.3e}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "entropy": cmd_entropy,
    "route": cmd_route,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
