"""Command-line entry point: ``zsal {synth-model,prompts,localize,eval,ablate,bench}``.

Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import metrics
from .image_io import ImageInputError, preprocess, read_mask, render_map
from .pipeline import localize, localize_array
from .prompts import TextTokenPair, ablation_tiers, build_token_pair, load_bank
from .tensor_core import DegenerateInputError, NonFiniteError, ShapeError
from .text import TextInputError, TokenizerSpec
from .tta import NoiseSpec, TtaConfig
from .vision import EncodeMode
from .weights_io import (
    ArchiveError,
    ConfigError,
    ModelConfig,
    load_archive,
    make_synthetic_model,
    save_archive,
)

log = logging.getLogger("zsal")

PIXEL_METRICS = ("auroc", "f1max", "pro")
IMAGE_METRICS = ("auroc", "f1max", "aupr")
ALL_METRICS = ("auroc", "f1max", "aupr", "pro")
MAX_FAILURE_RATE = 0.01


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- loading


def _load_model(args):
    config = None
    if getattr(args, "config", None):
        config = ModelConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    store = load_archive(args.model, config)
    if config is None:
        config = store.config()
    return store, config


def _load_tokens(path) -> TextTokenPair:
    return TextTokenPair.from_store(load_archive(path))


class TokenSource:
    """One token archive for every class, or a directory of ``<class>.tokens``."""

    def __init__(self, path):
        self.path = Path(path)
        self._cache: dict[str, TextTokenPair] = {}

    def get(self, class_name: str) -> TextTokenPair:
        key = class_name if self.path.is_dir() else ""
        if key not in self._cache:
            target = self.path / f"{class_name}.tokens" if self.path.is_dir() else self.path
            self._cache[key] = _load_tokens(target)
        return self._cache[key]


def _tokenizer(args, config: ModelConfig) -> TokenizerSpec:
    data = resources.files("zsal.data")
    vocab = args.vocab or data.joinpath("toy_vocab.txt")
    merges = args.merges or data.joinpath("toy_merges.txt")
    spec = TokenizerSpec.from_files(vocab, merges, config.context_length)
    if spec.vocab_size != config.vocab_size:
        raise ConfigError(
            f"tokenizer has {spec.vocab_size} tokens but the model expects {config.vocab_size}"
        )
    return spec


def _tta_config(args) -> TtaConfig | None:
    if not args.tta:
        return None
    noise = NoiseSpec(mu=args.mu, sigma=args.sigma, seed=args.seed)
    return TtaConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        noise=noise,
    )


@dataclass(frozen=True)
class ManifestRecord:
    index: int
    image_path: Path
    mask_path: Path | None
    class_name: str
    label: int


def read_manifest(path) -> list[ManifestRecord]:
    """Tab-separated lines: image_path, mask_path or ``-``, class_name, label.

    Relative paths resolve against the manifest's directory; blank lines and
    lines starting with ``#`` are skipped.
    """
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4 or fields[3] not in ("0", "1"):
            raise ConfigError(f"{path}:{lineno}: expected 4 tab-separated fields with label 0/1")
        image, mask, cls, label = fields
        mask_path = None if mask == "-" else path.parent / mask
        if (mask_path is None) != (label == "0"):
            raise ConfigError(f"{path}:{lineno}: label 1 requires a mask path and label 0 forbids one")
        records.append(ManifestRecord(len(records), path.parent / image, mask_path, cls, int(label)))
    return records


# ---------------------------------------------------------------- commands


def cmd_synth_model(args) -> int:
    if args.config in (None, "tiny"):
        config = ModelConfig.tiny()
    elif args.config == "default":
        config = ModelConfig()
    else:
        config = ModelConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    save_archive(make_synthetic_model(config, args.seed), args.out)
    return 0


def cmd_prompts(args) -> int:
    store, config = _load_model(args)
    bank = load_bank(args.prompts_file, args.class_name)
    if args.tier:
        bank = ablation_tiers(bank)[args.tier]
    pair = build_token_pair(bank, store, config, _tokenizer(args, config))
    meta = {"class_name": args.class_name, "tier": args.tier or "+DA"}
    save_archive(pair.to_store(meta), args.out)
    print(f"{pair.n_pairs} prompt pairs -> {args.out}")
    return 0


def _write_trace(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "L_d", "L_p", "L"])
        for row in trace:
            writer.writerow([row.epoch, repr(row.l_d), repr(row.l_p), repr(row.total)])


def cmd_localize(args) -> int:
    store, config = _load_model(args)
    pair = _load_tokens(args.tokens)
    result = localize(
        args.image,
        store,
        config,
        pair,
        mode=args.mode,
        tta=_tta_config(args),
        tau=args.tau,
        smooth_sigma=args.smooth_sigma,
        fuse_max=args.fuse_max,
    )
    render_map(result.anomaly_map, args.out, args.out_raw)
    if args.trace:
        if result.trace is None:
            raise UsageError("--trace needs --tta")
        _write_trace(result.trace, args.trace)
    print(repr(result.image_score))
    return 0


def _mean(values):
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def evaluate_manifest(
    records,
    store,
    config,
    tokens: TokenSource,
    mode: str,
    tta: TtaConfig | None,
    tau: float | None,
    wanted=ALL_METRICS,
    smooth_sigma: float = 0.0,
    fuse_max: bool = False,
    workers: int = 1,
    fpr_limit: float = 0.3,
) -> dict:
    """Localize every manifest image and compute per-class and mean metrics."""

    def run(rec: ManifestRecord):
        try:
            cfg = None if tta is None else replace(tta, noise=replace(tta.noise, seed=tta.noise.seed + rec.index))
            out = localize(
                rec.image_path, store, config, tokens.get(rec.class_name),
                mode=mode, tta=cfg, tau=tau, smooth_sigma=smooth_sigma, fuse_max=fuse_max,
            )
            h, w = out.anomaly_map.scores.shape
            if rec.mask_path is None:
                mask = np.zeros((h, w), dtype=np.uint8)
            else:
                mask = read_mask(rec.mask_path)
                if mask.shape != (h, w):
                    raise ImageInputError(f"{rec.mask_path}: mask {mask.shape} != image {(h, w)}")
            return rec, out, mask, None
        except (ImageInputError, OSError, NonFiniteError, DegenerateInputError, ArchiveError) as exc:
            return rec, None, None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, records))
    else:
        results = [run(r) for r in records]

    failures = [{"image": str(rec.image_path), "error": err} for rec, _, _, err in results if err]
    for f in failures:
        log.warning("skipping %s: %s", f["image"], f["error"])

    by_class: dict[str, list] = {}
    for rec, out, mask, err in results:
        if err is None:
            by_class.setdefault(rec.class_name, []).append((rec, out, mask))

    classes = {}
    modes = set()
    for cls in sorted(by_class):
        items = by_class[cls]
        pix_scores = np.concatenate([o.anomaly_map.scores.ravel() for _, o, _ in items])
        pix_labels = np.concatenate([m.ravel() for _, _, m in items])
        img_scores = np.array([o.image_score for _, o, _ in items])
        img_labels = np.array([r.label for r, _, _ in items])
        modes.add(metrics.threshold_mode(pix_scores.size))
        pixel = {
            "auroc": metrics.auroc(pix_scores, pix_labels),
            "f1max": metrics.f1max(pix_scores, pix_labels),
            "pro": _pro_for(items, fpr_limit),
        }
        image = {
            "auroc": metrics.auroc(img_scores, img_labels),
            "f1max": metrics.f1max(img_scores, img_labels),
            "aupr": metrics.aupr(img_scores, img_labels),
        }
        classes[cls] = {
            "n_images": len(items),
            "pixel": {k: v for k, v in pixel.items() if k in wanted},
            "image": {k: v for k, v in image.items() if k in wanted},
        }
    mean = {
        level: {
            k: _mean([c[level][k] for c in classes.values()])
            for k in (PIXEL_METRICS if level == "pixel" else IMAGE_METRICS)
            if k in wanted
        }
        for level in ("pixel", "image")
    }
    return {
        "mode": str(mode),
        "tta": tta is not None,
        "classes": classes,
        "mean": mean,
        "threshold_mode": "quantile" if "quantile" in modes else "exact",
        "n_images": len(records),
        "failures": failures,
    }


def _pro_for(items, fpr_limit):
    maps = [o.anomaly_map.scores for _, o, _ in items]
    masks = [m for _, _, m in items]
    return metrics.pro(maps, masks, fpr_limit)


def _report_rows(report, label_fields=None):
    rows = []
    for cls, entry in list(report["classes"].items()) + [("mean", report["mean"])]:
        row = dict(label_fields or {})
        row["class"] = cls
        for level in ("pixel", "image"):
            for k, v in entry[level].items():
                row[f"{level}_{k}"] = "" if v is None else repr(v)
        rows.append(row)
    return rows


def _write_csv(rows, path) -> None:
    fields = []
    for row in rows:
        for k in row:
            if k not in fields:
                fields.append(k)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _parse_metrics(text) -> tuple[str, ...]:
    wanted = tuple(m.strip() for m in text.split(",") if m.strip())
    unknown = set(wanted) - set(ALL_METRICS)
    if unknown or not wanted:
        raise UsageError(f"unknown metrics {sorted(unknown)}; choose from {', '.join(ALL_METRICS)}")
    return wanted


def _check_failures(report) -> int:
    n = report["n_images"]
    if n and len(report["failures"]) / n > MAX_FAILURE_RATE:
        print(f"{len(report['failures'])} of {n} images failed", file=sys.stderr)
        return 3
    return 0


def cmd_eval(args) -> int:
    store, config = _load_model(args)
    wanted = _parse_metrics(args.metrics)
    report = evaluate_manifest(
        read_manifest(args.manifest), store, config, TokenSource(args.tokens),
        EncodeMode.parse(args.mode).value, _tta_config(args), args.tau, wanted,
        args.smooth_sigma, args.fuse_max, args.workers, args.fpr_limit,
    )
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    _write_csv(_report_rows(report), csv_path)
    print(json.dumps(report["mean"], sort_keys=True))
    return _check_failures(report)


def _parse_token_tiers(text) -> list[tuple[str, str]]:
    tiers = []
    for item in text.split(","):
        label, sep, path = item.partition("=")
        tiers.append((label, path) if sep else (Path(item).stem, item))
    return tiers


def cmd_ablate(args) -> int:
    store, config = _load_model(args)
    records = read_manifest(args.manifest)
    modes = [EncodeMode.parse(m.strip()).value for m in args.modes.split(",")]
    starts = [int(s) for s in args.vv_start_sweep.split(",")] if args.vv_start_sweep else [None]
    rows, status = [], 0
    for label, path in _parse_token_tiers(args.tokens):
        tokens = TokenSource(path)
        for mode in modes:
            for start in starts if mode == "vv_multi" else [None]:
                cfg = config if start is None else config.replace(vv_start_layer=start)
                report = evaluate_manifest(
                    records, store, cfg, tokens, mode, _tta_config(args), args.tau, PIXEL_METRICS,
                    workers=args.workers,
                )
                status = max(status, _check_failures(report))
                px = report["mean"]["pixel"]
                rows.append({
                    "prompts": label,
                    "mode": mode,
                    "vv_start_layer": cfg.vv_start_layer if mode == "vv_multi" else "",
                    "auroc": px["auroc"],
                    "f1max": px["f1max"],
                    "pro": px["pro"],
                })
    print(f"{'prompts':<10} {'mode':<9} {'start':>5} {'AUROC':>7} {'F1Max':>7} {'PRO':>7}")
    for r in rows:
        cells = [f"{100 * r[k]:7.1f}" if r[k] is not None else "      -" for k in ("auroc", "f1max", "pro")]
        print(f"{r['prompts']:<10} {r['mode']:<9} {str(r['vv_start_layer']):>5} {' '.join(cells)}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
        _write_csv(rows, Path(args.out).with_suffix(".csv"))
    return status


def _time(fn, iters: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def cmd_bench(args) -> int:
    store, config = _load_model(args)
    pair = _load_tokens(args.tokens)
    image, size = preprocess(args.image, config)
    paths = [("tfa", None)]
    if args.tta:
        paths.append(("tta", _tta_config(args)))
    results = []
    for name, tta in paths:
        times = _time(
            lambda: localize_array(image, size, store, config, pair, mode=args.mode, tta=tta, tau=args.tau),
            args.iters,
            args.warmup,
        )
        results.append({
            "path": name,
            "mode": args.mode,
            "iters": args.iters,
            "mean_ms": statistics.fmean(times),
            "std_ms": statistics.pstdev(times) if len(times) > 1 else 0.0,
        })
    report = {"image_size": config.image_size, "results": results}
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


# ---------------------------------------------------------------- parser


def _add_model(p):
    p.add_argument("--model", required=True, help="model weight archive")
    p.add_argument("--config", help="model config JSON (default: config stored in the archive)")


def _add_run(p):
    p.add_argument("--mode", default="vv_multi", choices=[m.value for m in EncodeMode])
    p.add_argument("--tau", type=float, default=None, help="logit temperature (default: model config)")
    p.add_argument("--tta", action="store_true", help="enable test-time adaptation")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--sigma", type=float, default=None, help="absolute noise std (default: 0.1 x token RMS)")
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--smooth-sigma", type=float, default=0.0)
    p.add_argument("--fuse-max", action="store_true", help="fuse the map maximum into the image score")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-model", help="write a seeded random model archive")
    p.add_argument("--config", default="tiny", help="'tiny', 'default' or a config JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_model)

    p = sub.add_parser("prompts", help="encode a prompt bank into a token archive")
    _add_model(p)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--prompts-file", default=None, help="prompt bank JSON (default: shipped bank)")
    p.add_argument("--tier", choices=["base", "+CS", "+DA"], default=None)
    p.add_argument("--vocab", default=None, help="tokenizer vocabulary (default: shipped toy vocab)")
    p.add_argument("--merges", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("localize", help="anomaly map for one image")
    _add_model(p)
    p.add_argument("--tokens", required=True)
    p.add_argument("--image", required=True)
    _add_run(p)
    p.add_argument("--out", required=True, help="16-bit PGM output")
    p.add_argument("--out-raw", default=None, help="raw float32 map output")
    p.add_argument("--trace", default=None, help="CSV loss trace (with --tta)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="evaluate over a dataset manifest")
    _add_model(p)
    p.add_argument("--tokens", required=True, help="token archive or directory of <class>.tokens")
    p.add_argument("--manifest", required=True)
    _add_run(p)
    p.add_argument("--metrics", default=",".join(ALL_METRICS))
    p.add_argument("--fpr-limit", type=float, default=0.3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="JSON report")
    p.add_argument("--csv", default=None, help="CSV report (default: next to --out)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare encode modes / prompt tiers")
    _add_model(p)
    p.add_argument("--tokens", required=True, help="label=path[,label=path...]")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modes", default="qkv,v_last,vv_last,vv_multi")
    p.add_argument("--vv-start-sweep", default=None, help="comma-separated start layers for vv_multi")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="per-image timing")
    _add_model(p)
    p.add_argument("--tokens", required=True)
    p.add_argument("--image", required=True)
    _add_run(p)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, TextInputError, ShapeError, json.JSONDecodeError) as exc:
        print(f"zsal: error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, DegenerateInputError, FloatingPointError) as exc:
        print(f"zsal: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ArchiveError, ImageInputError) as exc:
        print(f"zsal: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
