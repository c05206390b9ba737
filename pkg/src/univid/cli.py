"""Operator command line: data generation, training, sampling, verification, inspection.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every command is
deterministic given its flags (including --seed). UNIVID_THREADS caps torch's
intra-op parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import factory, sampling, training
from .conditioning import Vocabulary
from .dataio import (ClipDataset, ClipSpec, COLORS, MOTIONS, SHAPES, SPEEDS,
                     load_checkpoint, read_tensor, write_dataset, write_ppm, write_tensor)
from .errors import UnividError
from .gradcheck import MODULES as GRADCHECK_MODULES, check_module
from .metrics import first_frame_fidelity, psnr, temporal_smoothness
from .pyramid import FACTORS
from .unet import GROUPS, ParameterStore


class UsageError(Exception):
    """Flag combinations that argparse alone cannot reject (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="univid", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a deterministic synthetic moving-shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, required=True)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", required=True, choices=list(training.STAGES))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint directory to start from")

    s = sub.add_parser("sample", help="generate a video from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", required=True, choices=list(sampling.MODES))
    s.add_argument("--prompt", default=None, help="caption tokens, space separated")
    s.add_argument("--image", default=None, help=".uvt reference image [3,H,W] (or a clip; frame 0 is used)")
    s.add_argument("--lambda-t", type=float, default=None)
    s.add_argument("--lambda-v", type=float, default=None)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=None, help="frame count (default: training value)")
    s.add_argument("--out", required=True, action="append",
                   help=".uvt tensor and/or .ppm frame grid; repeatable")

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--module", required=True, choices=list(GRADCHECK_MODULES))
    c.add_argument("--eps", type=float, default=None, help="FD step (default per module)")
    c.add_argument("--tol", type=float, default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--dtype", choices=["float32", "float64"], default=None)

    i = sub.add_parser("inspect", help="per-group parameter counts and the pyramid table")
    i.add_argument("--ckpt", required=True)

    e = sub.add_parser("eval", help="proxy metrics CSV for a generated video vs a dataset clip")
    e.add_argument("--video", required=True, help="generated video .uvt [F,3,H,W]")
    e.add_argument("--data", required=True)
    e.add_argument("--clip", required=True, help="clip id, e.g. 0000")
    e.add_argument("--out", default=None, help="CSV path (default: stdout)")
    return p


def _cmd_gen_data(args) -> int:
    H, W = args.size
    rng = np.random.default_rng(args.seed)
    specs = []
    for _ in range(args.clips):
        for _attempt in range(100):
            spec = ClipSpec(
                shape=str(rng.choice(SHAPES)),
                color=str(rng.choice(list(COLORS))),
                motion=str(rng.choice(list(MOTIONS))),
                speed=str(rng.choice(list(SPEEDS))),
                frames=args.frames, height=H, width=W,
            )
            clip_seed = int(rng.integers(0, 2**31 - 1))
            try:
                from .dataio import gen_clip

                gen_clip(spec, clip_seed)
            except UnividError:
                continue
            specs.append((spec, clip_seed))
            break
        else:
            raise UnividError(f"no valid clip spec found for {args.frames} frames at {H}x{W}")
    write_dataset(args.out, specs)
    print(f"wrote {len(specs)} clips to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = cfgmod.resolve(cfgmod.load_config(args.config))
    for field in ("steps", "lr"):
        cfgmod.require(cfg, f"train.{args.stage}.{field}")
    dataset = ClipDataset(args.data)
    if args.stage == "adapters" and dataset.frames == 1:
        raise UnividError("the adapters stage needs video batches, but this dataset holds single frames")
    vocab = Vocabulary.load(dataset.vocab_path)
    cfg = factory.derive_from_dataset(cfg, dataset)
    resolved_text = cfgmod.serialize(cfg)

    model = factory.build_model(cfg, vocab)
    store = ParameterStore.from_model(model)
    start_step = 0
    if args.resume:
        params, groups, extras = load_checkpoint(args.resume)
        store.load_values(params)
        start_step = int(extras.get("step", "0"))
    else:
        factory.init_model(model, cfg["seed"])

    plan = training.StagePlan(
        stage=args.stage,
        steps=cfg[f"train.{args.stage}.steps"],
        lr=cfg[f"train.{args.stage}.lr"],
        momentum=cfg[f"train.{args.stage}.momentum"],
        image_fraction=cfg[f"train.{args.stage}.image_fraction"],
        p_drop_text=cfg[f"train.{args.stage}.p_drop_text"],
        p_drop_image=cfg[f"train.{args.stage}.p_drop_image"],
        ckpt_every=cfg["train.ckpt_every"],
        clip_norm=cfg["train.clip_norm"],
    )
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(resolved_text, encoding="utf-8")
    rng = torch.Generator().manual_seed(cfg["seed"] + start_step)
    rows = training.run_stage(model, store, dataset, plan, factory.build_schedule(cfg),
                              factory.build_codec(cfg), vocab, run_dir, rng, resolved_text,
                              start_step=start_step)
    if rows:
        print(f"stage {args.stage}: {len(rows)} steps, final loss {rows[-1]['loss']:.6f}")
    else:
        print(f"stage {args.stage}: 0 steps")
    print(f"run directory: {run_dir}")
    return 0


def _load_reference_image(path: str) -> torch.Tensor:
    tensor = read_tensor(path)
    if tensor.dim() == 4:
        tensor = tensor[0]
    if tensor.dim() != 3:
        raise UnividError(f"reference image must be [3,H,W] or [F,3,H,W], got {tuple(tensor.shape)}")
    return tensor


def _cmd_sample(args) -> int:
    if args.mode in ("t2v", "ti2v") and args.prompt is None:
        raise UsageError(f"--mode {args.mode} requires --prompt")
    if args.mode in ("i2v", "ti2v") and args.image is None:
        raise UsageError(f"--mode {args.mode} requires --image")
    if args.mode == "t2v" and args.image is not None:
        raise UsageError("--mode t2v does not accept --image")
    if args.mode == "i2v" and args.prompt is not None:
        raise UsageError("--mode i2v does not accept --prompt")
    for out in args.out:
        if not (out.endswith(".uvt") or out.endswith(".ppm")):
            raise UsageError(f"--out {out!r} must end in .uvt or .ppm")
    model, store, cfg, vocab, schedule, codec = factory.load_model_bundle(args.ckpt)
    prompt = args.prompt.split() if args.prompt is not None else None
    image = _load_reference_image(args.image) if args.image is not None else None
    lambdas = None
    if args.lambda_t is not None or args.lambda_v is not None:
        base = sampling.DEFAULT_LAMBDAS[args.mode]
        lambdas = (args.lambda_t if args.lambda_t is not None else base[0],
                   args.lambda_v if args.lambda_v is not None else base[1])
    frames = args.frames if args.frames is not None else cfg["data.frames"]
    video = sampling.generate(
        model, schedule, codec, vocab,
        frames=frames, latent_channels=cfg["model.in_channels"],
        latent_height=cfg["model.latent_height"], latent_width=cfg["model.latent_width"],
        mode=args.mode, prompt=prompt, image=image, lambdas=lambdas,
        steps=args.steps, guidance_scale=args.scale, seed=args.seed,
    )
    for out in args.out:
        if out.endswith(".uvt"):
            write_tensor(out, video)
        else:
            write_ppm(out, video)
        print(f"wrote {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    dtype = {"float32": torch.float32, "float64": torch.float64, None: None}[args.dtype]
    report = check_module(args.module, eps=args.eps, tol=args.tol, seed=args.seed, dtype=dtype)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 2


def _cmd_inspect(args) -> int:
    params, groups, extras = load_checkpoint(args.ckpt)
    counts = {g: 0 for g in GROUPS}
    for name, tensor in params.items():
        counts[groups[name]] += tensor.numel()
    print(f"checkpoint: {args.ckpt}")
    for key in sorted(extras):
        print(f"  {key}: {extras[key]}")
    total = sum(counts.values())
    for g in GROUPS:
        print(f"group {g}: {counts[g]} parameters")
    print(f"total: {total} parameters in {len(params)} tensors")

    cfg_path = Path(args.ckpt) / "config.resolved"
    if cfg_path.exists():
        cfg = cfgmod.resolve(cfgmod.load_config(cfg_path))
        print("pyramid schedule (factor: step r, kernel k):")
        for f in FACTORS:
            print(f"  f={f}: r={cfg[f'pyramid.f{f}.r']} k={cfg[f'pyramid.f{f}.k']}")
    print("novel-branch output projections (L2 norm):")
    for name in sorted(params):
        if name.endswith("proj.w_o.weight"):
            print(f"  {name}: {float(params[name].norm()):.6e}")
    return 0


def _cmd_eval(args) -> int:
    video = read_tensor(args.video)
    dataset = ClipDataset(args.data)
    ids = [r["id"] for r in dataset.rows]
    if args.clip not in ids:
        raise UnividError(f"clip id {args.clip!r} not in dataset (have {ids[:8]}...)")
    clip, _, reference = dataset.clip(ids.index(args.clip))
    _, mean_db = psnr(video, clip)
    ff_db = first_frame_fidelity(video, reference)
    smooth = temporal_smoothness(video)
    lines = ["clip_id,psnr_db,first_frame_db,smoothness",
             f"{args.clip},{mean_db:.4f},{ff_db:.4f},{smooth:.6f}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "gradcheck": _cmd_gradcheck,
    "inspect": _cmd_inspect,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("UNIVID_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except UsageError as exc:
        print(f"univid: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"univid: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
