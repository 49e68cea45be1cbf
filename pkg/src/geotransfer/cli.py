"""Command-line entry point: ``geotransfer {harmonize,ablate,selftest}``.

Exit codes: 0 success, 1 selftest failure, 2 validation error,
3 pipeline error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from PIL import UnidentifiedImageError

from . import __version__
from .backends.sd_adapter import BackendUnavailableError, backend_name
from .imagemask import read_image, read_mask, write_image
from .pipeline import ConfigError, PipelineConfig, StageError, ablation_conditions, harmonize

EXIT_OK, EXIT_SELFTEST, EXIT_INVALID, EXIT_PIPELINE = 0, 1, 2, 3

# flag dest -> config key
FLAG_KEYS = {
    "color_shift": "a",
    "color_mode": "color_mode",
    "steps": "T",
    "invert_iters": "invert_iters",
    "ring_radius": "ring_radius",
    "shift_x": "shift_x",
    "shift_y": "shift_y",
    "scale": "scale",
    "rotate": "rotate",
    "ta_ablation": "ta_ablation",
    "gp_ablation": "gp_ablation",
    "seed": "seed",
    "backend": "backend",
    "paste_back": "paste_back",
    "num_train_steps": "num_train_steps",
}


class ValidationError(Exception):
    pass


def _add_run_args(p: argparse.ArgumentParser):
    p.add_argument("--src", required=True, help="source RGB PNG")
    p.add_argument("--mask", required=True, help="source mask PNG (binarized at 128)")
    p.add_argument("--tar", required=True, help="target RGB PNG")
    p.add_argument("--config", help="JSON file with flat PipelineConfig keys")
    p.add_argument("--color-shift", type=float, help="colour-shift strength a in [0, 1] (default 0.5)")
    p.add_argument("--color-mode", choices=["none", "shift", "histogram"])
    p.add_argument("--steps", type=int, help="diffusion steps T (default 25)")
    p.add_argument("--invert-iters", type=int, help="fixed-point iterations per inversion step (default 5)")
    p.add_argument("--ring-radius", type=int, help="boundary ring width in pixels (default 8)")
    p.add_argument("--shift-x", type=float, help="patch shift in pixels, +right")
    p.add_argument("--shift-y", type=float, help="patch shift in pixels, +down")
    p.add_argument("--scale", type=float, help="patch scale factor")
    p.add_argument("--rotate", type=float, help="patch rotation in degrees, counter-clockwise")
    p.add_argument("--ta-ablation", choices=["both", "target_only", "geo_only"])
    p.add_argument("--gp-ablation", choices=["both", "src_only", "self_only"])
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=["toy", "sd-adapter"], help="overrides HARMONIZE_BACKEND")
    p.add_argument("--num-train-steps", type=int, help=argparse.SUPPRESS)
    p.add_argument("--paste-back", action="store_true", default=None,
                   help="re-composite the target outside the geometry mask")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geotransfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    h = sub.add_parser("harmonize", help="transfer geometry from source to target")
    _add_run_args(h)
    h.add_argument("--out", required=True, help="output PNG")
    h.add_argument("--pasted", help="pasted-image PNG (default <out>_pasted.png)")
    h.add_argument("--manifest", help="manifest JSON (default <out>.manifest.json)")
    h.set_defaults(func=cmd_harmonize)

    a = sub.add_parser("ablate", help="run the ablation grid")
    _add_run_args(a)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--axis", choices=["color", "ta", "gp", "all"], default="all")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("selftest", help="run the embedded property checks")
    s.add_argument("--quick", action="store_true", help="skip the 20-seed inversion statistics")
    s.set_defaults(func=cmd_selftest)
    return parser


def effective_config(args, env=None) -> PipelineConfig:
    """defaults < HARMONIZE_BACKEND < --config file < flags."""
    values = {}
    try:
        values["backend"] = backend_name(env)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        values.update(loaded)
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    try:
        return PipelineConfig.from_dict(values)
    except ConfigError as e:
        raise ValidationError(f"invalid config: {e}") from None


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_inputs(args):
    try:
        src, tar = read_image(args.src), read_image(args.tar)
        mask = read_mask(args.mask)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise ValidationError(f"cannot read input image: {e}") from None
    if src.shape != tar.shape:
        raise ValidationError(f"source {src.shape} and target {tar.shape} sizes differ")
    if mask.shape != src.shape:
        raise ValidationError(f"mask {mask.shape} does not match source {src.shape}")
    inputs = {name: {"path": str(getattr(args, name)), "sha256": sha256(getattr(args, name))}
              for name in ("src", "mask", "tar")}
    return src, mask, tar, inputs


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_guarded(fn):
    try:
        return fn()
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except BackendUnavailableError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as e:
        if e.stage == "validate" or isinstance(e.cause, BackendUnavailableError):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_INVALID
        print(f"pipeline error in stage '{e.stage}': {e.cause}", file=sys.stderr)
        return EXIT_PIPELINE


def cmd_harmonize(args) -> int:
    def run():
        config = effective_config(args)
        src, mask, tar, inputs = _load_inputs(args)
        out = Path(args.out)
        pasted = Path(args.pasted) if args.pasted else out.with_name(out.stem + "_pasted.png")
        manifest = Path(args.manifest) if args.manifest else out.with_name(out.stem + ".manifest.json")
        art = harmonize(src, mask, tar, config)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_image(art.output_image, out)
        write_image(art.pasted_image, pasted)
        _write_json(manifest, {
            "config": config.to_dict(),
            "inputs": inputs,
            "outputs": {"output": str(out), "pasted": str(pasted)},
            "timings_ms": art.timings_ms,
            "version": __version__,
        })
        print(f"wrote {out}, {pasted}, {manifest}")
        return EXIT_OK

    return _run_guarded(run)


def cmd_ablate(args) -> int:
    def run():
        base = effective_config(args)
        src, mask, tar, inputs = _load_inputs(args)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        conditions = []
        for label, overrides in ablation_conditions(args.axis):
            try:
                config = base.with_(**overrides)
            except ConfigError as e:
                raise ValidationError(f"invalid config for {label}: {e}") from None
            art = harmonize(src, mask, tar, config)
            out, pasted = out_dir / f"{label}.png", out_dir / f"{label}_pasted.png"
            write_image(art.output_image, out)
            write_image(art.pasted_image, pasted)
            conditions.append({"label": label, "axis": label.split("-", 1)[0], "config": config.to_dict(),
                               "outputs": {"output": str(out), "pasted": str(pasted)},
                               "timings_ms": art.timings_ms})
            print(f"[{label}] wrote {out}")
        _write_json(out_dir / "manifest.json", {
            "axis": args.axis,
            "config": base.to_dict(),
            "inputs": inputs,
            "conditions": conditions,
            "version": __version__,
        })
        return EXIT_OK

    return _run_guarded(run)


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(quick=args.quick)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.detail}")
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_SELFTEST


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
