"""Command-line front end.

Subcommands: run (inference + diagnostics reports), schedule (token/FLOPs
sweep as CSV), bench (throughput), diag (single metric), mask-eval (accuracy
under random masking), init (write random weights).

A run specification is a JSON document with optional sections "model" and
"reduction" plus "weights", "inputs", "out", "seed" and "labels"; command-line
flags override the corresponding spec fields. Unknown keys anywhere are
rejected. Exit codes: 0 success, 2 configuration, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container, diag, embed, vit
from .config import (
    ModelConfig,
    ReductionConfig,
    STRATEGIES,
    model_config_from_dict,
    reduction_config_from_dict,
)
from .errors import ConfigError, FormatError, NumericError, RepieceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_SPEC_KEYS = {"model", "reduction", "weights", "inputs", "out", "seed", "labels"}
_DEFAULT_MASKS = "7,10,15,20,25,50"


@dataclass
class RunSpec:
    """Fully resolved run parameters (spec file merged with flag overrides)."""

    model: ModelConfig
    reduction: ReductionConfig
    weights: str | None
    inputs: list[str]
    out: str | None
    seed: int
    labels: dict[str, int]


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok]


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def _single(values: list, flag: str) -> float:
    if len(values) != 1:
        raise ConfigError(f"{flag} takes a single value here, got {values}")
    return values[0]


def load_spec(args: argparse.Namespace) -> RunSpec:
    data: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: spec must be a JSON object")
        unknown = sorted(set(data) - _SPEC_KEYS)
        if unknown:
            raise ConfigError(f"{args.config}: unknown spec keys {unknown}")

    model = model_config_from_dict(data.get("model", {}))
    reduction = reduction_config_from_dict(data.get("reduction", {}))
    overrides: dict = {}
    if getattr(args, "strategy", None):
        overrides["strategy"] = args.strategy
    if getattr(args, "proportion", None):
        overrides["nonsemantic_proportion"] = _single(_float_list(args.proportion), "--proportion")
    if getattr(args, "merge_ratio", None):
        overrides["merge_ratio"] = _single(_float_list(args.merge_ratio), "--merge-ratio")
    if getattr(args, "keep_rate", None):
        overrides["keep_rate"] = _single(_float_list(args.keep_rate), "--keep-rate")
    if getattr(args, "tome_r", None):
        overrides["tome_reduction"] = int(_single(_int_list(args.tome_r), "--tome-r"))
    if overrides:
        reduction = reduction.with_overrides(**overrides)

    labels = data.get("labels", {})
    if not isinstance(labels, dict) or not all(
        isinstance(k, str) and isinstance(v, int) for k, v in labels.items()
    ):
        raise ConfigError("spec key 'labels' must map file names to integer classes")

    inputs = [str(p) for p in args.input] if getattr(args, "input", None) else list(
        data.get("inputs", [])
    )
    return RunSpec(
        model=model,
        reduction=reduction,
        weights=str(args.weights) if getattr(args, "weights", None) else data.get("weights"),
        inputs=inputs,
        out=str(args.out) if getattr(args, "out", None) else data.get("out"),
        seed=args.seed if getattr(args, "seed", None) is not None else int(data.get("seed", 0)),
        labels={str(k): int(v) for k, v in labels.items()},
    )


def read_image(path: str) -> np.ndarray:
    """Load a [3,H,W] image from a P6 PPM or a tensor-container file."""
    if str(path).lower().endswith(".ppm"):
        return embed.read_ppm(path)
    tensors, _ = container.load_tensors(path)
    if "image" in tensors:
        tensor = tensors["image"]
    elif len(tensors) == 1:
        tensor = next(iter(tensors.values()))
    else:
        raise FormatError(f"{path}: expected one tensor named 'image', found {sorted(tensors)}")
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise FormatError(f"{path}: image tensor must be [3,H,W], got {tensor.shape}")
    return tensor


def _write_or_print(text: str, out_dir: str | None, filename: str) -> None:
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        Path(out_dir, filename).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_run(args: argparse.Namespace) -> int:
    spec = load_spec(args)
    if not spec.weights:
        raise ConfigError("run needs a weights file (--weights or spec key 'weights')")
    if not spec.inputs:
        raise ConfigError("run needs at least one input image (--input or spec key 'inputs')")
    weights = vit.load_weights(spec.weights)
    paths = sorted(spec.inputs)

    def one(path: str) -> dict:
        logits, run = vit.forward_image(read_image(path), weights, spec.reduction)
        return {
            "input": os.path.basename(path),
            "prediction": int(np.argmax(logits)),
            "logits": [float(v) for v in logits],
            "diag": run.to_dict(),
        }

    with ThreadPoolExecutor(max_workers=diag.max_workers(len(paths))) as pool:
        reports = list(pool.map(one, paths))
    for path, report in zip(paths, reports):
        _write_or_print(
            diag.canonical_json(report), spec.out, Path(path).stem + ".run.json"
        )
    return EXIT_OK


def cmd_schedule(args: argparse.Namespace) -> int:
    # the sweep flags hold lists here; resolve the base spec without them
    base = argparse.Namespace(
        **{**vars(args), "keep_rate": None, "merge_ratio": None, "proportion": None, "tome_r": None}
    )
    spec = load_spec(base)
    red = spec.reduction
    keeps = _float_list(args.keep_rate) if args.keep_rate else [red.keep_rate]
    merges = _float_list(args.merge_ratio) if args.merge_ratio else [red.merge_ratio]
    props = _float_list(args.proportion) if args.proportion else [red.nonsemantic_proportion]
    tomes = _int_list(args.tome_r) if args.tome_r else [red.tome_reduction]
    print("strategy,proportion,merge_ratio,keep_rate,tome_r,layer,tokens,flops_cum")
    for prop in props:
        for merge in merges:
            for keep in keeps:
                for tome_r in tomes:
                    cfg = red.with_overrides(
                        nonsemantic_proportion=prop,
                        merge_ratio=merge,
                        keep_rate=keep,
                        tome_reduction=tome_r,
                    )
                    for layer, tokens, flops_cum in diag.schedule_rows(spec.model, cfg):
                        print(
                            f"{cfg.strategy},{prop},{merge},{keep},{tome_r},"
                            f"{layer},{tokens},{flops_cum}"
                        )
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    spec = load_spec(args)
    weights = vit.load_weights(spec.weights) if spec.weights else None
    result = diag.bench(
        spec.model,
        spec.reduction,
        batch_size=args.batch,
        iterations=args.iters,
        weights=weights,
        seed=spec.seed,
    )
    _write_or_print(diag.canonical_json(result), spec.out, "bench.json")
    return EXIT_OK


def _first_run(spec: RunSpec) -> diag.RunDiag:
    if not spec.weights:
        raise ConfigError("this metric needs a weights file")
    if not spec.inputs:
        raise ConfigError("this metric needs an input image")
    weights = vit.load_weights(spec.weights)
    _, run = vit.forward_image(read_image(sorted(spec.inputs)[0]), weights, spec.reduction)
    return run


def cmd_diag(args: argparse.Namespace) -> int:
    spec = load_spec(args)
    metric = args.metric
    if metric == "schedule":
        rows = diag.schedule_rows(spec.model, spec.reduction)
        report = {
            "metric": metric,
            "rows": [{"layer": l, "tokens": t, "flops_cum": f} for l, t, f in rows],
        }
    elif metric == "overlap":
        run = _first_run(spec)
        q = 100.0 * (1.0 - spec.reduction.nonsemantic_proportion)
        report = {"metric": metric, "q_percent": q, "value": diag.merged_topk_overlap(run, q)}
    elif metric == "similarity":
        run = _first_run(spec)
        report = {
            "metric": metric,
            "first": diag.merged_pair_similarity(run, "first"),
            "last": diag.merged_pair_similarity(run, "last"),
        }
    elif metric == "inattn":
        run = _first_run(spec)
        trail = diag.inattn_trail(run, spec.reduction.nonsemantic_proportion)
        report = {
            "metric": metric,
            "trail": [{"layer": layer, "ratio": ratio} for layer, ratio in trail],
        }
    else:  # adjacency
        if not spec.weights or not spec.inputs:
            raise ConfigError("adjacency needs a weights file and an input image")
        weights = vit.load_weights(spec.weights)
        image = read_image(sorted(spec.inputs)[0])
        cfg = weights.config
        if cfg.stem == "grid":
            batch = embed.patchify_embed(
                image, cfg.patch_size, weights.patch_projection, weights.patch_bias
            )
        else:
            batch = embed.coherence_stem(image, weights.stem_weights())
        report = {"metric": metric, "stem": cfg.stem, "value": diag.adjacency_similarity(batch)}
    _write_or_print(diag.canonical_json(report), spec.out, f"diag_{metric}.json")
    return EXIT_OK


def cmd_mask_eval(args: argparse.Namespace) -> int:
    spec = load_spec(args)
    if not spec.weights:
        raise ConfigError("mask-eval needs a weights file")
    if not spec.inputs:
        raise ConfigError("mask-eval needs input images")
    k_list = _int_list(args.masks if args.masks else _DEFAULT_MASKS)
    weights = vit.load_weights(spec.weights)
    paths = sorted(spec.inputs)
    images = [read_image(p) for p in paths]
    names = [os.path.basename(p) for p in paths]
    if all(name in spec.labels for name in names):
        labels = [spec.labels[name] for name in names]
    else:
        # no labels given: score stability against the model's own unmasked predictions
        labels = [
            int(np.argmax(vit.forward_image(img, weights, spec.reduction)[0])) for img in images
        ]
    rows = diag.mask_eval(weights, images, labels, k_list, spec.seed, spec.reduction)
    lines = ["k,correct,total,accuracy"]
    lines += [f"{r['k']},{r['correct']},{r['total']},{r['accuracy']}" for r in rows]
    print("\n".join(lines))
    if spec.out:
        _write_or_print(diag.canonical_json({"rows": rows}), spec.out, "mask_eval.json")
    return EXIT_OK


def cmd_init(args: argparse.Namespace) -> int:
    if not args.out:
        raise ConfigError("init needs --out for the weights file")
    data: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    model_section = data.get("model", data) if isinstance(data, dict) else data
    cfg = model_config_from_dict(model_section or {})
    seed = args.seed if args.seed is not None else 0
    weights = vit.init_random(cfg, seed)
    vit.save_weights(weights, args.out)
    print(diag.canonical_json({"out": str(args.out), "seed": seed, "tensors": len(vit.weights_schema(cfg))}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-spec JSON file")
    common.add_argument("--weights", help="weights container file")
    common.add_argument("--input", action="append", help="input image (repeatable)")
    common.add_argument("--out", help="output directory (default: stdout)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--strategy", choices=STRATEGIES)
    common.add_argument("--keep-rate", dest="keep_rate")
    common.add_argument("--merge-ratio", dest="merge_ratio")
    common.add_argument("--proportion", help="non-semantic proportion p")
    common.add_argument("--tome-r", dest="tome_r")

    parser = argparse.ArgumentParser(
        prog="repiece", description="token-reduction ViT inference engine"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="classify inputs, write reports")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("schedule", parents=[common], help="token/FLOPs sweep as CSV")
    p.set_defaults(func=cmd_schedule)
    p = sub.add_parser("bench", parents=[common], help="wall-clock throughput")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=20)
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("diag", parents=[common], help="compute one diagnostic metric")
    p.add_argument(
        "--metric",
        choices=("schedule", "overlap", "similarity", "inattn", "adjacency"),
        default="schedule",
    )
    p.set_defaults(func=cmd_diag)
    p = sub.add_parser("mask-eval", parents=[common], help="accuracy under random masks")
    p.add_argument("--masks", help=f"comma-separated mask counts (default {_DEFAULT_MASKS})")
    p.set_defaults(func=cmd_mask_eval)
    p = sub.add_parser("init", parents=[common], help="write random weights for a config")
    p.set_defaults(func=cmd_init)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericError as exc:
        print(f"repiece: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"repiece: bad file: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"repiece: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RepieceError, ValueError) as exc:
        print(f"repiece: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
