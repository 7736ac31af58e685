"""Command-line front door: synth-mix, extract, train, score, eval, gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage or validation error. Every
run prints its resolved configuration and seed to stderr; artifacts go to
the --out directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (
    CheckpointError,
    ContainerError,
    ManifestError,
    ToyExtractor,
    image_to_unit,
    load_image,
    load_manifest,
    write_manifest,
    write_tensor,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .metrics import DEFAULT_BINS, evaluate_run
from .scoring import score_images
from .synth import build_mixed_dataset
from .trainer import TrainConfig, train


def _log(msg: str):
    print(msg, file=sys.stderr)


def _resolved(args: argparse.Namespace, keys: list[str]) -> str:
    return json.dumps({k: str(getattr(args, k)) for k in keys if getattr(args, k, None) is not None})


def cmd_synth_mix(args) -> int:
    _log(f"synth-mix config: {_resolved(args, ['inliers', 'outliers', 'count', 'seed', 'out'])}")
    manifest = build_mixed_dataset(args.inliers, args.outliers, args.count, args.seed, args.out)
    _log(f"wrote {manifest}")
    return 0


def cmd_extract(args) -> int:
    _log(f"extract config: {_resolved(args, ['images', 'seed', 'channels', 'out'])}")
    records = load_manifest(args.images)
    out_dir = Path(args.out)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    extractor = ToyExtractor(args.seed, args.channels)
    rows = []
    for rec in records:
        feat = extractor.extract(image_to_unit(load_image(rec.image)))
        rel = f"features/{rec.id}.ft"
        write_tensor(out_dir / rel, feat)
        row = {"id": rec.id, "image": str(rec.image), "feature": rel}
        if rec.mask is not None:
            row["mask"] = str(rec.mask)
        rows.append(row)
    manifest = write_manifest(out_dir / "features.jsonl", rows)
    _log(f"wrote {manifest} ({len(rows)} records)")
    return 0


def _load_config(args) -> TrainConfig:
    base = {}
    if args.config:
        with open(args.config) as f:
            base = json.load(f)
    # explicit flags win over the config file
    for key in ("seed", "epochs", "variant", "flow_steps", "alpha", "contrast_space", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    config = _load_config(args)
    _log(f"train config: {json.dumps(config.to_dict(), sort_keys=True)}")
    _log(f"seed: {config.seed}")
    result = train(config, args.mixed, args.outliers, args.out, resume=Path(args.resume) if args.resume else None)
    _log(f"checkpoint: {result.checkpoint} (steps={result.steps_run}, halted={result.halted})")
    return 1 if result.halted else 0


def cmd_score(args) -> int:
    _log(f"score config: {_resolved(args, ['ckpt', 'images', 'out'])}")
    written = score_images(args.ckpt, args.images, args.out)
    _log(f"scored {len(written)} images into {args.out}")
    return 0


def cmd_eval(args) -> int:
    _log(f"eval config: {_resolved(args, ['scores', 'masks', 'bins', 'out'])}")
    result = evaluate_run(args.scores, args.masks, bins=args.bins, out_json=args.out)
    _log(f"auprc={result.auprc:.6f} fpr95={result.fpr95:.6f} -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    _log(f"gradcheck seed: {args.seed}")
    results = run_gradcheck(args.seed)
    failed = False
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:18s} max-rel-err {err:.3e}  {status}")
        failed = failed or err >= TOLERANCE
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowclas", description=__doc__)
    p.add_argument("--version", action="version", version=f"flowclas {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-mix", help="composite pseudo-outliers into inlier images")
    s.add_argument("--inliers", required=True, help="inlier manifest (JSONL)")
    s.add_argument("--outliers", required=True, help="outlier manifest with masks (JSONL)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth_mix)

    s = sub.add_parser("extract", help="run the frozen toy extractor over a manifest")
    s.add_argument("--images", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--channels", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_extract)

    s = sub.add_parser("train", help="train the flow with the configured objective")
    s.add_argument("--config", help="JSON config file (flags override)")
    s.add_argument("--mixed", required=True, help="mixed dataset manifest")
    s.add_argument("--outliers", required=True, help="outlier manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--variant", choices=("contrastive", "min", "ml_only"))
    s.add_argument("--flow-steps", dest="flow_steps", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--contrast-space", dest="contrast_space", choices=("latent", "feature"))
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("score", help="emit per-image score tensors and heatmaps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("eval", help="evaluate score tensors against mask PNGs")
    s.add_argument("--scores", required=True, help="directory of <id>.score.ft files")
    s.add_argument("--masks", required=True, help="manifest with mask entries")
    s.add_argument("--bins", type=int, default=DEFAULT_BINS)
    s.add_argument("--out", required=True, help="eval.json output path")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors already
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ManifestError, ContainerError, CheckpointError, ValueError, FileNotFoundError) as e:
        _log(f"error: {e}")
        return 2
    except RuntimeError as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
