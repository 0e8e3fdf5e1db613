"""Command-line front end: train, evaluate, upscale, benchmark, check.

Every subcommand prints its resolved configuration (including the seed)
before doing anything, so logs are self-describing.  Flags mirror the
TrainConfig / model spec fields one-to-one; `--config FILE` reads the
same keys from a `key = value` file (UTF-8, `#` comments), with
command-line flags overriding the file.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import dataio, fast, gradsuite, models, reference, train


# ---------------------------------------------------------------------------
# flag plumbing


def _comma_ints(raw):
    try:
        return tuple(int(tok) for tok in str(raw).split(",") if tok.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}")


def _comma_strs(raw):
    return tuple(tok.strip() for tok in str(raw).split(",") if tok.strip() != "")


def _bench_shapes(raw):
    shapes = []
    for tok in _comma_strs(raw):
        parts = tok.lower().split("x")
        if len(parts) != 6:
            raise argparse.ArgumentTypeError(f"shape {tok!r} must be CinxCoutxHxWxSxK")
        try:
            shapes.append(tuple(int(p) for p in parts))
        except ValueError:
            raise argparse.ArgumentTypeError(f"shape {tok!r} must be CinxCoutxHxWxSxK")
    if not shapes:
        raise argparse.ArgumentTypeError("no shapes given")
    return tuple(shapes)


def _parse_bool(raw):
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {raw!r}")


def _add_common(p):
    p.add_argument("--config", metavar="FILE", help="key = value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")


def _add_train_flags(p):
    # mirrors TrainConfig field for field
    p.add_argument("--lr0", type=float, default=1e-3, help="initial learning rate")
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--max-steps", type=int, default=0, help="stop after this many optimizer steps (0 = no cap)")
    p.add_argument("--schedule", choices=["step_decay", "plateau"], default="step_decay")
    p.add_argument("--step-milestones", type=_comma_ints, default=(1200, 1600), metavar="E1,E2,...")
    p.add_argument("--step-factor", type=float, default=0.1)
    p.add_argument("--plateau-factor", type=float, default=0.8)
    p.add_argument("--plateau-patience", type=int, default=10)
    p.add_argument("--plateau-threshold", type=float, default=1e-4)
    p.add_argument("--loss", choices=["mse"], default="mse")
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--patch-stride", type=int, default=16)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--augment-compose", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0)


def _add_sisr_spec_flags(p):
    p.add_argument("--upsample-factor", type=int, default=2, help="power-of-two scale")
    p.add_argument("--features", type=int, default=32)
    p.add_argument("--block-kind", choices=["attention", "deconv"], default="attention")
    p.add_argument("--stem-kernel", type=int, default=5)
    p.add_argument("--res-kernel", type=int, default=3)
    p.add_argument("--up-kernel", type=int, default=3)
    p.add_argument("--scale-logits", action=argparse.BooleanOptionalAction, default=True)


def _add_joint_spec_flags(p):
    # None means "keep the preset / built-in default"; resolved spec is printed
    p.add_argument("--preset", choices=sorted(models.JOINT_PRESETS), default=None,
                   help="named width preset; explicit --cnn-* flags override its stacks")
    p.add_argument("--upsample-factor", type=int, default=None, help="power-of-two scale (default 4)")
    p.add_argument("--cnn-t", type=_comma_ints, default=None, metavar="C1,C2,...")
    p.add_argument("--cnn-g", type=_comma_ints, default=None, metavar="C1,C2,...")
    p.add_argument("--cnn-m", type=_comma_ints, default=None, metavar="C1,C2,...")
    p.add_argument("--cnn-f", type=_comma_ints, default=None, metavar="C1,C2,...")
    p.add_argument("--conv-kernel", type=int, default=None, help="default 3")
    p.add_argument("--attn-kernel", type=int, default=None, help="default 3")
    p.add_argument("--share-mixer", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--scale-logits", action=argparse.BooleanOptionalAction, default=None)


def _sisr_spec_from_args(args):
    return models.SisrSpec(
        upsample_factor=args.upsample_factor,
        features=args.features,
        block_kind=args.block_kind,
        stem_kernel=args.stem_kernel,
        res_kernel=args.res_kernel,
        up_kernel=args.up_kernel,
        scale_logits=args.scale_logits,
    )


def _joint_spec_from_args(args):
    fields = {}
    if args.preset is not None:
        fields.update(models.JOINT_PRESETS[args.preset])
    for name in ("upsample_factor", "cnn_t", "cnn_g", "cnn_m", "cnn_f",
                 "conv_kernel", "attn_kernel", "share_mixer", "scale_logits"):
        val = getattr(args, name)
        if val is not None:
            fields[name] = val
    return models.JointSpec(**fields)


def _train_config_from_args(args):
    return train.TrainConfig(
        lr0=args.lr0,
        batch_size=args.batch_size,
        epochs=args.epochs,
        max_steps=args.max_steps,
        schedule=args.schedule,
        step_milestones=args.step_milestones,
        step_factor=args.step_factor,
        plateau_factor=args.plateau_factor,
        plateau_patience=args.plateau_patience,
        plateau_threshold=args.plateau_threshold,
        seed=args.seed,
        loss=args.loss,
        patch_size=args.patch_size,
        patch_stride=args.patch_stride,
        augment=args.augment,
        augment_compose=args.augment_compose,
        eval_every=args.eval_every,
        checkpoint_every=args.checkpoint_every,
    )


def _fmt(val):
    if isinstance(val, (tuple, list)):
        return ",".join(str(v) for v in val)
    return str(val)


def _print_config(args):
    print("resolved config:")
    for key in sorted(vars(args)):
        if key in ("func", "config"):
            continue
        print(f"  {key} = {_fmt(getattr(args, key))}")


def _print_spec(spec):
    print("resolved model:")
    for f in spec.__dataclass_fields__:
        print(f"  {f} = {_fmt(getattr(spec, f))}")


def _load_params(spec, checkpoint, seed, build):
    params = build(spec, np.random.Generator(np.random.PCG64(seed)))
    models.load_into(params, checkpoint)
    return params


def _fmt_db(x):
    return "+inf" if math.isinf(x) else f"{x:.4f}"


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train_sisr(args):
    spec = _sisr_spec_from_args(args)
    config = _train_config_from_args(args)
    _print_config(args)
    dataset = train.load_sisr_dataset(args.manifest)
    result = train.train_sisr(spec, dataset, config, out_dir=args.out)
    print(f"steps: {result.steps}")
    print(f"best epoch: {result.best_epoch}  best eval loss: {result.best_eval_loss!r}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoints: {result.best_checkpoint} {result.final_checkpoint}")
    return 0


def _cmd_train_joint(args):
    spec = _joint_spec_from_args(args)
    config = _train_config_from_args(args)
    _print_config(args)
    _print_spec(spec)
    dataset = train.load_joint_dataset(args.manifest)
    result = train.train_joint(spec, dataset, config, out_dir=args.out)
    print(f"steps: {result.steps}")
    print(f"best epoch: {result.best_epoch}  best eval loss: {result.best_eval_loss!r}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoints: {result.best_checkpoint} {result.final_checkpoint}")
    return 0


def _select_split(dataset, split):
    if split == "all":
        items = []
        for role in ("train", "eval"):
            items.extend(dataset.get(role, []))
    else:
        items = list(dataset.get(split, []))
    if not items:
        raise ValueError(f"no images in split {split!r}")
    return items


def _cmd_eval_sisr(args):
    spec = _sisr_spec_from_args(args)
    _print_config(args)
    dataset = train.load_sisr_dataset(args.manifest)
    images = _select_split(dataset, args.split)
    params = _load_params(spec, args.checkpoint, args.seed, models.build_sisr_params)
    print(f"{'image':<24} {'psnr_db':>10} {'rmse':>12}")
    psnrs, rmses = [], []
    for img in images:
        _, p, r = train._eval_sisr(spec, params, [img])
        psnrs.append(p)
        rmses.append(r)
        print(f"{img.name:<24} {_fmt_db(p):>10} {r:>12.6f}")
    print(f"{'mean':<24} {_fmt_db(float(np.mean(psnrs))):>10} {float(np.mean(rmses)):>12.6f}")
    return 0


def _cmd_eval_joint(args):
    spec = _joint_spec_from_args(args)
    _print_config(args)
    _print_spec(spec)
    dataset = train.load_joint_dataset(args.manifest)
    samples = _select_split(dataset, args.split)
    params = _load_params(spec, args.checkpoint, args.seed, models.build_joint_params)
    print(f"{'sample':<24} {'psnr_db':>10} {'rmse':>12}")
    psnrs, rmses = [], []
    for smp in samples:
        _, p, r = train._eval_joint(spec, params, [smp])
        psnrs.append(p)
        rmses.append(r)
        print(f"{smp.name:<24} {_fmt_db(p):>10} {r:>12.4f}")
    print(f"{'mean':<24} {_fmt_db(float(np.mean(psnrs))):>10} {float(np.mean(rmses)):>12.4f}")
    return 0


def _cmd_upsample(args):
    spec = _sisr_spec_from_args(args)
    _print_config(args)
    img = dataio.load_png(args.input)
    params = _load_params(spec, args.checkpoint, args.seed, models.build_sisr_params)
    s = spec.upsample_factor
    if img.shape[0] == 3:
        ycc = dataio.rgb_to_ycbcr(img)
        y_sr = models.sisr_forward(ycc[0:1], spec, params).value
        h, w = y_sr.shape[1:]
        # model restores luminance; chroma rides along bicubically
        cb = dataio.bicubic_resize(ycc[1:2], h, w)
        cr = dataio.bicubic_resize(ycc[2:3], h, w)
        out = dataio.ycbcr_to_rgb(np.concatenate([np.clip(y_sr, 0, 1), cb, cr]))
    else:
        y_sr = models.sisr_forward(dataio.rgb_to_y(img), spec, params).value
        out = np.clip(np.rint(y_sr * 255.0), 0, 255).astype(np.uint8)
    dataio.save_png(args.out, out)
    print(f"wrote {args.out}: {img.shape} -> {out.shape} ({s}x)")
    return 0


def _cmd_bench(args):
    _print_config(args)
    records = fast.bench(
        ops=args.ops, shapes=args.shapes, reps=args.reps, threads=args.threads, seed=args.seed
    )
    fast.write_bench_csv(records, args.out)
    print(f"{'op':<26} {'shape':<22} {'median_ms':>10} {'gflops':>8}")
    for r in records:
        shape = f"{r.c_in}x{r.c_out}x{r.h}x{r.w}x{r.stride}x{r.kernel_size}"
        print(f"{r.op:<26} {shape:<22} {r.median_ns / 1e6:>10.3f} {r.gflops:>8.3f}")
    by_key = {(r.op, r.c_in, r.c_out, r.h, r.w, r.stride, r.kernel_size): r for r in records}
    for r in records:
        if r.op != "attention_upsample_fast":
            continue
        ref = by_key.get(("attention_upsample_ref", r.c_in, r.c_out, r.h, r.w, r.stride, r.kernel_size))
        if ref is not None:
            shape = f"{r.c_in}x{r.c_out}x{r.h}x{r.w}x{r.stride}x{r.kernel_size}"
            print(f"speedup {shape} ({r.threads} threads): {ref.median_ns / r.median_ns:.2f}x")
    print(f"wrote {args.out}")
    return 0


def _cmd_gradcheck(args):
    _print_config(args)
    results = gradsuite.run_suite(
        seed=args.seed, eps=args.eps, rel_tol=args.tol, max_coords=args.max_coords
    )
    failed = 0
    for case in results:
        tag = "ok  " if case.ok else "FAIL"
        failed += 0 if case.ok else 1
        print(f"{tag} {case.case:<26} max rel err {case.max_rel_err:.3e} ({len(case.results)} params)")
    print(f"{len(results) - failed}/{len(results)} cases ok")
    return 0 if failed == 0 else 1


def _cmd_params(args):
    _print_config(args)
    n_dec = reference.count_params_deconv(args.cin, args.cout, args.k)
    n_att = reference.count_params_attention(args.cin, args.cout, args.k)
    print(f"layer parameters (Cin={args.cin}, Cout={args.cout}, K={args.k}):")
    print(f"  deconv     {n_dec}")
    print(f"  attention  {n_att}")
    print(f"  ratio      {n_dec / n_att:.3f}x")
    f_att = fast.flops_attention_upsample(args.cin, args.cout, args.height, args.width, args.s, args.k)
    f_dec = fast.flops_deconv(args.cin, args.cout, args.height, args.width, args.s, args.k)
    print(f"flops at H={args.height}, W={args.width}, S={args.s}:")
    print(f"  deconv     {f_dec}")
    print(f"  attention  {f_att}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="attnup",
        description="Train, evaluate and benchmark attention-based upsampling networks.",
    )
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = subs.add_parser("train-sisr", help="train a super-resolution model on a PNG manifest")
    p.add_argument("--manifest", required=True, help="tab-separated role/path list")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    _add_sisr_spec_flags(p)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_train_sisr)

    p = subs.add_parser("eval-sisr", help="print per-image PSNR/RMSE for a trained model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "eval", "all"], default="all")
    _add_sisr_spec_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_eval_sisr)

    p = subs.add_parser("train-joint", help="train a guided depth upsampler on depth/guide pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_joint_spec_flags(p)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_train_joint)

    p = subs.add_parser("eval-joint", help="print per-sample PSNR/RMSE for a guided upsampler")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "eval", "all"], default="all")
    _add_joint_spec_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_eval_joint)

    p = subs.add_parser("upsample", help="upscale one PNG with a trained model")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_sisr_spec_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_upsample)

    p = subs.add_parser("bench", help="time the upsampling kernels and write a CSV")
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--ops", type=_comma_strs, default=fast.DEFAULT_BENCH_OPS, metavar="OP1,OP2,...")
    p.add_argument("--shapes", type=_bench_shapes, default=fast.DEFAULT_BENCH_SHAPES,
                   metavar="CinxCoutxHxWxSxK,...")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--threads", type=int, default=None, help="worker threads for the fast kernels")
    _add_common(p)
    p.set_defaults(func=_cmd_bench)

    p = subs.add_parser("gradcheck", help="finite-difference check of every operator")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=200)
    _add_common(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = subs.add_parser("params", help="parameter and FLOP counts for one upsampling layer")
    p.add_argument("--cin", type=int, default=64)
    p.add_argument("--cout", type=int, default=64)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--s", type=int, default=2)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    _add_common(p)
    p.set_defaults(func=_cmd_params)

    return parser, dict(subs.choices)


def _find_config(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _load_config_file(path):
    entries = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, raw = line.partition("=")
        if not eq or not key.strip():
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        entries[key.strip().replace("-", "_")] = raw.strip()
    return entries


def _apply_config_defaults(sub, path):
    try:
        entries = _load_config_file(path)
    except OSError as e:
        sub.error(f"cannot read config file: {e}")
    except ValueError as e:
        sub.error(str(e))
    actions = {a.dest: a for a in sub._actions}
    for key, raw in entries.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            sub.error(f"unknown config key {key!r} in {path}")
        try:
            if isinstance(action, argparse.BooleanOptionalAction):
                val = _parse_bool(raw)
            elif action.type is not None:
                val = action.type(raw)
            else:
                val = raw
        except (argparse.ArgumentTypeError, ValueError) as e:
            sub.error(f"config key {key!r}: {e}")
        if action.choices is not None and val not in action.choices:
            sub.error(f"config key {key!r}: {val!r} not in {sorted(action.choices)}")
        sub.set_defaults(**{key: val})


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = _build_parser()
    try:
        cfg = _find_config(argv)
        if cfg is not None:
            cmd = next((tok for tok in argv if tok and not tok.startswith("-")), None)
            if cmd in subs:
                _apply_config_defaults(subs[cmd], cfg)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return int(args.func(args))
    except Exception as e:  # runtime failure -> exit 1, with the reason on stderr
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
