"""Command-line entry points: generate, cache-guidance, train, evaluate, ablate, export-maps.

Exit codes: 0 ok, 2 usage/config error, 3 numeric failure.  Every command
writes into an output directory, refuses to reuse a non-empty one unless
``--force`` is given, and appends one JSON line to ``manifest.jsonl`` there.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
import torch
from PIL import Image

from . import __version__
from .attribution import AttributionError, AttributionMap, gradcam, resample, write_png
from .data import SPLITS, DatasetError, SpuriousSpec, format_group_table, generate_synthetic, load_dataset, save_dataset
from .evaluation import EvaluationError, evaluate, format_report, report_emit
from .guidance import (
    GuidanceCache,
    GuidanceError,
    OracleGuidance,
    PromptSet,
    TinyVLM,
    VLMGuidance,
    cache_guidance,
    oracle_guidance,
)
from .losses import LossBreakdown, LossError
from .model import CheckpointError, ShapeError, load_checkpoint, save_checkpoint
from .trainer import (
    ConfigError,
    NonFiniteLoss,
    config_from_kv,
    jtt_identify,
    jtt_weights,
    load_config,
    parse_kv,
    train,
    true_class_score,
)

log = logging.getLogger("superguide")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MANIFEST = "manifest.jsonl"
USAGE_ERRORS = (
    AttributionError,
    CheckpointError,
    ConfigError,
    DatasetError,
    EvaluationError,
    GuidanceError,
    LossError,
    ShapeError,
    FileNotFoundError,
)


class UsageError(Exception):
    pass


# -- output directories & manifests ----------------------------------------------


def prepare_out(path, force):
    """Create ``path``; refuse a directory holding anything but a manifest unless forced."""
    if os.path.isdir(path):
        leftovers = [n for n in os.listdir(path) if n != MANIFEST]
        if leftovers and not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    elif os.path.exists(path):
        raise UsageError(f"output path {path} exists and is not a directory")
    os.makedirs(path, exist_ok=True)


def append_manifest(out, command, config, seed, outputs, started):
    rec = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": f"superguide {__version__}",
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": sorted(outputs),
    }
    with open(os.path.join(out, MANIFEST), "a", encoding="utf-8") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _read_kv_file(path):
    try:
        with open(path, encoding="utf-8") as f:
            return parse_kv(f.read())
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from e


# -- guidance plumbing -----------------------------------------------------------


def cache_root(data_dir, override=None):
    return override or GuidanceCache.default_root(os.path.join(data_dir, "guidance_cache"))


def make_provider(tag, ds, hw, prompts=None, corruption=0.0, seed=0):
    if tag == "oracle":
        population = [r.id for r in ds.split("train")]
        return OracleGuidance(hw, corruption=corruption, seed=seed, population=population)
    if tag == "vlm":
        provider = VLMGuidance(TinyVLM(seed=seed), PromptSet(prompts or ("a shape",)), hw)
        return provider
    raise UsageError(f"unknown guidance provider {tag!r}")


def guidance_for_training(ds, cfg, tag, hw, root):
    """Train-split relevant maps keyed by id.

    The oracle is always available and fills the cache as needed; the VLM
    provider is never run implicitly, so its cache must already exist.
    """
    provider = make_provider(tag, ds, hw, cfg.prompts, cfg.oracle_corruption, cfg.seed)
    records = ds.split("train")
    if tag == "vlm":
        cache = GuidanceCache(root, provider.key())
        cache.check(create=False)
    else:
        cache = cache_guidance(records, provider, root)
    return {r.id: cache.load(r.id).relevant.grid for r in records}


# -- commands ----------------------------------------------------------------------


def cmd_generate(args):
    started = _now()
    kv = _read_kv_file(args.spec)
    spec = SpuriousSpec.from_mapping(kv)
    spec.validate()
    prepare_out(args.out, args.force)
    ds = generate_synthetic(spec)
    save_dataset(ds, args.out)
    table = format_group_table(ds)
    sys.stdout.write(table)
    with open(os.path.join(args.out, "groups.csv"), "w", encoding="utf-8") as f:
        f.write(table)
    append_manifest(args.out, "generate", kv, spec.seed, ["metadata.csv", "groups.csv"], started)
    return EXIT_OK


def cmd_cache_guidance(args):
    ds = load_dataset(args.data)
    kv = _read_kv_file(args.config) if args.config else {}
    prompts = tuple(p.strip() for p in kv.get("prompts", "a shape").split("|") if p.strip())
    seed = int(kv.get("seed", 0)) if args.seed is None else args.seed
    hw = (ds.image_shape[-1] // 2,) * 2
    provider = make_provider(args.guidance, ds, hw, prompts, float(kv.get("oracle_corruption", 0.0)), seed)
    root = cache_root(args.data, args.cache)
    records = [r for s in SPLITS for r in ds.split(s)]
    before = provider.calls
    cache_guidance(records, provider, root)
    print(f"{provider.tag}: {provider.calls - before} maps computed, cache at {os.path.join(root, provider.tag)}")
    return EXIT_OK


def _load_train_config(args):
    return _apply_flags(load_config(args.config, require_jtt=args.jtt), args)


def _apply_flags(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    if args.detach_alpha:
        cfg.detach_alpha = True
    cfg.guidance = args.guidance
    cfg.__post_init__()
    return cfg


def run_training(ds, cfg, out, cache_dir=None, data_dir="."):
    """Train (optionally JTT-weighted) and write checkpoint, loss log and metrics to ``out``."""
    hw = (ds.image_shape[-1] // 2,) * 2
    maps = guidance_for_training(ds, cfg, cfg.guidance, hw, cache_root(data_dir, cache_dir))
    weights = None
    if cfg.jtt is not None:
        flagged = jtt_identify(ds, cfg)
        weights = jtt_weights(flagged, cfg.jtt.upweight)
        with open(os.path.join(out, "jtt_ids.txt"), "w", encoding="utf-8") as f:
            f.write("".join(f"{i}\n" for i in sorted(flagged)))
    rows = []
    try:
        state = train(ds, cfg, maps, sample_weights=weights, on_batch=lambda e, b, bd: rows.append(bd.csv_row(e, b)))
    finally:
        with open(os.path.join(out, "loss_log.csv"), "w", encoding="utf-8") as f:
            f.write(LossBreakdown.CSV_HEADER + "\n" + "".join(r + "\n" for r in rows))
    with open(os.path.join(out, "epochs.csv"), "w", encoding="utf-8") as f:
        f.write("epoch,val_worst,val_average,val_variance_pct\n")
        for e, rep in enumerate(state.history, start=1):
            f.write(f"{e},{rep.worst!r},{rep.average!r},{rep.variance_pct!r}\n")
    best = state.best_model()
    save_checkpoint(
        os.path.join(out, "checkpoint.pt"),
        best,
        seed=cfg.seed,
        epoch=state.best_epoch,
        extra={"attribution_score": cfg.attribution_score, "best_val_wga": state.best_val_wga},
    )
    report_emit(evaluate(best, ds, "val"), os.path.join(out, "val_report.csv"))
    return state


def cmd_train(args):
    started = _now()
    cfg = _load_train_config(args)
    ds = load_dataset(args.data)
    prepare_out(args.out, args.force)
    state = run_training(ds, cfg, args.out, args.cache, args.data)
    print(f"best epoch {state.best_epoch} val worst-group acc {state.best_val_wga:.4f}")
    outputs = ["checkpoint.pt", "loss_log.csv", "epochs.csv", "val_report.csv"]
    append_manifest(args.out, "train", cfg.snapshot(), cfg.seed, outputs, started)
    return EXIT_OK


def cmd_evaluate(args):
    started = _now()
    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}; choose from {list(SPLITS)}")
    ds = load_dataset(args.data)
    model, manifest = load_checkpoint(args.checkpoint)
    report = evaluate(model, ds, args.split)
    prepare_out(args.out, args.force)
    path = os.path.join(args.out, "report.csv")
    report_emit(report, path)
    sys.stdout.write(format_report(report))
    append_manifest(
        args.out, "evaluate", {"checkpoint": args.checkpoint, "split": args.split}, manifest.get("seed"), ["report.csv"], started
    )
    return EXIT_OK


def parse_prompt_variants(path):
    """``name: prompt | prompt | ...`` per line; ``#`` comments."""
    variants = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'name: prompt | prompt ...'")
            name, rest = (p.strip() for p in line.split(":", 1))
            variants.append((name, PromptSet(rest.split("|"))))
    if not variants:
        raise UsageError(f"{path}: no prompt variants")
    return variants


def cmd_ablate(args):
    started = _now()
    base = _load_train_config(args)
    if args.param == "prompts":
        values = parse_prompt_variants(args.values)
    else:
        raw = [v for v in args.values.split(",") if v.strip()]
        if not raw:
            raise UsageError("--values is empty")
        try:
            values = [(v.strip(), float(v)) for v in raw]
        except ValueError as e:
            raise UsageError(f"--values must be numbers: {args.values!r}") from e
    ds = load_dataset(args.data)
    prepare_out(args.out, args.force)
    results = []
    for i, (label, value) in enumerate(values):
        kv = _read_kv_file(args.config)
        if args.param == "prompts":
            kv["prompts"] = "|".join(value.prompts)
        else:
            kv[args.param] = repr(value)
        cfg = _apply_flags(config_from_kv(kv, require_jtt=args.jtt), args)
        run_dir = os.path.join(args.out, f"run{i:02d}")
        prepare_out(run_dir, args.force)
        # the cache layout has one directory per provider, so each prompt
        # variant gets a private cache root
        run_cache = os.path.join(run_dir, "guidance_cache") if args.param == "prompts" else args.cache
        if cfg.guidance == "vlm":
            hw = (ds.image_shape[-1] // 2,) * 2
            provider = make_provider("vlm", ds, hw, cfg.prompts, seed=cfg.seed)
            cache_guidance(ds.split("train"), provider, cache_root(args.data, run_cache))
        run_start = _now()
        state = run_training(ds, cfg, run_dir, run_cache, args.data)
        report = evaluate(state.best_model(), ds, "test")
        report_emit(report, os.path.join(run_dir, "test_report.csv"))
        append_manifest(run_dir, "ablate-run", cfg.snapshot(), cfg.seed, ["checkpoint.pt", "test_report.csv"], run_start)
        results.append((label, report))
    _write_ablation_tables(args.out, args.param, results)
    append_manifest(
        args.out, "ablate", {"param": args.param, "values": [v for v, _ in values]}, base.seed, ["runs.csv", "deltas.csv"], started
    )
    return EXIT_OK


def _write_ablation_tables(out, param, results):
    with open(os.path.join(out, "runs.csv"), "w", encoding="utf-8") as f:
        f.write("param,value,worst,average,variance_pct\n")
        for label, rep in results:
            f.write(f"{param},{label},{rep.worst!r},{rep.average!r},{rep.variance_pct!r}\n")
    ref_label, ref = results[0]
    with open(os.path.join(out, "deltas.csv"), "w", encoding="utf-8") as f:
        f.write("param,value,reference,delta_worst_pct,delta_average_pct\n")
        for label, rep in results[1:]:
            dw = 100.0 * (rep.worst - ref.worst)
            da = 100.0 * (rep.average - ref.average)
            f.write(f"{param},{label},{ref_label},{dw:.4f},{da:.4f}\n")
    print(open(os.path.join(out, "deltas.csv"), encoding="utf-8").read(), end="")


def head_maps(model, image, label, score="log_prob"):
    """Normalized head1/head2 GradCAM maps for one image at feature resolution."""
    x = torch.as_tensor(image)[None]
    with torch.enable_grad():
        code, feats = model.encode(x)
        y = torch.tensor([label])
        out = []
        for head, mu in ((1, code.mu1), (2, code.mu2)):
            s = true_class_score(model.classify(head, mu), y, score)
            out.append(gradcam(feats, s, detach_alpha=True, source=f"head{head}").grid.detach()[0])
    return out


def cmd_export_maps(args):
    started = _now()
    ds = load_dataset(args.data)
    model, manifest = load_checkpoint(args.checkpoint)
    by_id = ds.by_id()
    ids = [i.strip() for i in args.ids.split(",") if i.strip()]
    if not ids:
        raise UsageError("--ids is empty")
    unknown = [i for i in ids if i not in by_id]
    if unknown:
        raise UsageError(f"unknown sample id(s): {', '.join(unknown)}")
    prepare_out(args.out, args.force)
    size = ds.image_shape[-1]
    hw = (model.feat_size, model.feat_size)
    score = manifest.get("attribution_score", "log_prob")
    written = []
    for i in ids:
        r = by_id[i]
        m1, m2 = head_maps(model, r.image, r.label, score)
        if args.guidance == "oracle":
            guide = oracle_guidance(r, hw).relevant.grid
        else:
            kv = _read_kv_file(args.config) if args.config else {}
            prompts = tuple(p.strip() for p in kv.get("prompts", "a shape").split("|") if p.strip())
            provider = make_provider("vlm", ds, hw, prompts, seed=int(kv.get("seed", 0)))
            cache = GuidanceCache(cache_root(args.data, args.cache), provider.key())
            cache.check(create=False)
            guide = cache.load(i).relevant.grid
        rgb = np.round(np.clip(r.image.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(os.path.join(args.out, f"{i}_original.png"))
        for name, grid in (("head1", m1), ("head2", m2), ("guidance", guide)):
            up = resample(AttributionMap(torch.as_tensor(grid, dtype=torch.float64), "head1"), size, size).grid
            write_png(os.path.join(args.out, f"{i}_{name}.png"), up)
        written += [f"{i}_{n}.png" for n in ("original", "head1", "head2", "guidance")]
    append_manifest(args.out, "export-maps", {"checkpoint": args.checkpoint, "ids": ids}, manifest.get("seed"), written, started)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="superguide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"superguide {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic spurious-correlation dataset")
    g.add_argument("--spec", required=True, help="key=value dataset spec file")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("cache-guidance", help="precompute guidance maps for every sample")
    c.add_argument("--data", required=True)
    c.add_argument("--guidance", choices=("oracle", "vlm"), default="oracle")
    c.add_argument("--config", help="training config (prompts, seed, oracle_corruption)")
    c.add_argument("--seed", type=int)
    c.add_argument("--cache", help="cache root (default: $SUPER_CACHE_DIR or <data>/guidance_cache)")
    c.set_defaults(func=cmd_cache_guidance)

    def training_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--config", required=True)
        sp.add_argument("--guidance", choices=("oracle", "vlm"), default="oracle")
        sp.add_argument("--out", required=True)
        sp.add_argument("--jtt", action="store_true", help="upweight samples misclassified by a short ERM run")
        sp.add_argument("--detach-alpha", action="store_true", help="do not differentiate through GradCAM weights")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--cache")
        sp.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train the two-head model with attribution alignment")
    training_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="group metrics of a checkpoint on one split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="one training run per value of a single parameter")
    training_flags(a)
    a.add_argument("--param", required=True, choices=("beta", "lambda2", "prompts"))
    a.add_argument("--values", required=True, help="comma-separated numbers, or a prompt-variants file for prompts")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-maps", help="write original / head1 / head2 / guidance PNGs per sample")
    x.add_argument("--data", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--ids", required=True, help="comma-separated sample ids")
    x.add_argument("--out", required=True)
    x.add_argument("--guidance", choices=("oracle", "vlm"), default="oracle")
    x.add_argument("--config")
    x.add_argument("--cache")
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_export_maps)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        if e.breakdown is not None:
            print(f"last loss breakdown: {e.breakdown}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError,) + USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
