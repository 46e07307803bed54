"""Command-line front end: synth, train, eval, sensitivity, selfcheck.

Exit codes: 0 success, 1 invariant/selfcheck failure, 2 usage or config
error, 3 runtime error (I/O, training divergence). Every command writes a
run_manifest.json under --out with a content hash that excludes the
timestamp, so identical re-runs are verifiable by hash.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    AugmentConfig,
    DatasetError,
    SyntheticTaskSpec,
    generate_synthetic,
    load_paired_dataset,
    save_paired_dataset,
)
from .gradcheck import check_model_gradients
from .losses import LossConfig, discriminator_loss, generator_gan_loss
from .metrics import evaluate, psnr as psnr_metric, ssim as ssim_metric, mean_abs_error, to_unit
from .models import (
    CheckpointError,
    DiscriminatorSpec,
    GeneratorSpec,
    ModelSpecError,
    Translator,
    build_discriminator,
    build_generator,
    generator_from_checkpoint,
    load_checkpoint,
)
from .sensitivity import (
    SensitivityConfig,
    run_sensitivity,
    sensitivity_summary,
    summary_to_csv,
    summary_to_text,
)
from .training import TrainConfig, TrainingDiverged, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(ValueError):
    pass


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, input_hashes: dict,
                   outputs: list[str]) -> Path:
    body = {
        "command": command,
        "config": config,
        "input_hashes": input_hashes,
        "outputs": sorted(outputs),
        "version": __version__,
    }
    content_hash = hashlib.sha256(
        json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
    body["content_hash"] = content_hash
    body["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    path = out / "run_manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True))
    return path


def _merge_config(args: argparse.Namespace, keys: list[str]) -> None:
    """Apply config-file values for keys the command line left at None."""
    file_cfg = {}
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            file_cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {p} is not valid JSON: {e}") from e
        unknown = set(file_cfg) - set(keys)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for k in keys:
        if getattr(args, k, None) is None and k in file_cfg:
            setattr(args, k, file_cfg[k])


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticTaskSpec(task=args.task, image_size=args.size,
                             n_samples=args.n, seed=args.seed, texture=args.texture)
    written = []
    for split, n in (("train", args.n), ("val", args.n_val), ("test", args.n_test)):
        if n <= 0:
            continue
        split_spec = SyntheticTaskSpec(task=spec.task, image_size=spec.image_size,
                                       n_samples=n, seed=spec.seed, texture=spec.texture)
        ds = generate_synthetic(split_spec, split=split)
        manifest = save_paired_dataset(ds, out, manifest_extra={"spec": asdict(split_spec)})
        written.append(str(manifest.relative_to(out)))
    write_manifest(out, "synth", config=asdict(spec) | {"n_val": args.n_val, "n_test": args.n_test},
                   input_hashes={}, outputs=written)
    print(f"wrote synthetic dataset ({args.task}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

TRAIN_KEYS = ["mode", "epochs", "batch_size", "lr", "adam_beta1", "adam_beta2", "seed",
              "lambda_l1", "checkpoint_every", "log_every", "alternation",
              "depth", "base_filters", "max_filters", "dropout_p", "channels",
              "disc_filters", "load_size", "crop_size", "jitter"]

TRAIN_DEFAULTS = {"mode": "one2one", "epochs": 1, "batch_size": 1, "lr": 2e-4,
                  "adam_beta1": 0.5, "adam_beta2": 0.999, "seed": 0, "lambda_l1": 100.0,
                  "checkpoint_every": 0, "log_every": 10, "alternation": "same_batch",
                  "depth": 8, "base_filters": 64, "max_filters": 512, "dropout_p": 0.5,
                  "channels": 1, "disc_filters": "", "load_size": 0, "crop_size": 0,
                  "jitter": False}


def _train_config(args) -> TrainConfig:
    _merge_config(args, TRAIN_KEYS)
    vals = {k: (getattr(args, k) if getattr(args, k) is not None else TRAIN_DEFAULTS[k])
            for k in TRAIN_KEYS}
    gspec = GeneratorSpec(in_channels=vals["channels"], out_channels=vals["channels"],
                          depth=vals["depth"], base_filters=vals["base_filters"],
                          max_filters=vals["max_filters"], dropout_p=vals["dropout_p"])
    augment = None
    if vals["jitter"]:
        if vals["load_size"] <= 0 or vals["crop_size"] <= 0:
            raise UsageError("--jitter requires --load-size and --crop-size")
        augment = AugmentConfig(load_size=vals["load_size"], crop_size=vals["crop_size"],
                                enabled=True)
    dspec = None
    if vals["disc_filters"]:
        try:
            sched = tuple(int(v) for v in str(vals["disc_filters"]).split(","))
        except ValueError as e:
            raise UsageError(f"--disc-filters must be comma-separated ints: {e}") from e
        dspec = DiscriminatorSpec(in_channels=2 * vals["channels"], filter_schedule=sched)
    return TrainConfig(
        mode=vals["mode"], epochs=vals["epochs"], batch_size=vals["batch_size"],
        lr=vals["lr"], adam_beta1=vals["adam_beta1"], adam_beta2=vals["adam_beta2"],
        seed=vals["seed"], loss=LossConfig(lambda_l1=vals["lambda_l1"]),
        augment=augment, checkpoint_every=vals["checkpoint_every"],
        log_every=vals["log_every"], alternation=vals["alternation"], generator=gspec,
        discriminator=dspec,
    )


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data_root = Path(args.data)
    if not data_root.is_dir():
        raise UsageError(f"data directory not found: {data_root}")
    channels = cfg.generator.in_channels
    dataset = load_paired_dataset(data_root, "train", channels=channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, dataset, out_dir=out, resume_from=args.resume)
    input_hashes = {"data": _hash_dataset_dir(data_root)}
    if args.resume:
        input_hashes["resume"] = _sha256_file(Path(args.resume))
    write_manifest(out, "train", config=_jsonable(asdict(cfg)), input_hashes=input_hashes,
                   outputs=[p.name for p in out.iterdir() if p.name != "run_manifest.json"])
    print(f"trained {cfg.mode} for {result.checkpoint.step} steps; "
          f"checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _hash_dataset_dir(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(_sha256_file(p).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# eval

class _IdentityStub:
    def __call__(self, x):
        return x


class _LabelStub:
    """Test hook: returns the ground-truth label for each sample in order."""

    def __init__(self, dataset, direction):
        self.labels = {s.id: (s.y if direction == "A2B" else s.x) for s in dataset.samples}
        self.queue = [s.id for s in dataset.samples]

    def __call__(self, x):
        return self.labels[self.queue.pop(0)]


def _load_generator(path: str):
    return generator_from_checkpoint(load_checkpoint(path))


def cmd_eval(args) -> int:
    data_root = Path(args.data)
    if not data_root.is_dir():
        raise UsageError(f"data directory not found: {data_root}")
    dataset = load_paired_dataset(data_root, args.split, channels=args.channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    directions = ["A2B", "B2A"] if args.direction == "both" else [args.direction]
    input_hashes = {"data": _hash_dataset_dir(data_root)}
    outputs = []
    for direction in directions:
        if args.stub == "identity":
            g = _IdentityStub()
        elif args.stub == "label":
            g = _LabelStub(dataset, direction)
        else:
            if not args.checkpoint:
                raise UsageError("--checkpoint is required unless a --stub is given")
            g = Translator(_load_generator(args.checkpoint))
            input_hashes["checkpoint"] = _sha256_file(Path(args.checkpoint))
        report = evaluate(g, dataset, direction)
        jp, cp = out / f"report_{direction}.json", out / f"report_{direction}.csv"
        report.to_json(jp)
        report.to_csv(cp)
        outputs += [jp.name, cp.name]
        agg = report.aggregates
        print(f"{direction}: L1 {agg['l1_mean']:.4f}  PSNR {agg['psnr_mean']:.2f} dB  "
              f"SSIM {agg['ssim_mean']:.4f}  (n={len(report.per_sample)})")
        if args.panels > 0 and args.stub is None:
            panel = _write_panels(g, dataset, direction, out, args.panels)
            outputs.append(panel.name)
    write_manifest(out, "eval", config={"direction": args.direction, "split": args.split,
                                        "channels": args.channels, "panels": args.panels},
                   input_hashes=input_hashes, outputs=outputs)
    return EXIT_OK


def _write_panels(g, dataset, direction: str, out: Path, n: int) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import compare_images

    n = min(n, len(dataset))
    fig, axes = plt.subplots(n, 3, figsize=(7.5, 2.6 * n), squeeze=False)
    for i in range(n):
        s = dataset.samples[i]
        inp, label = (s.x, s.y) if direction == "A2B" else (s.y, s.x)
        pred = g(inp)
        l1, p, ss = compare_images(pred, label)
        for j, (img, title) in enumerate(
                ((inp, "input"), (pred, "output"), (label, "target"))):
            ax = axes[i][j]
            ax.imshow(to_unit(img)[0].transpose(1, 2, 0).squeeze(), cmap="gray",
                      vmin=0, vmax=1)
            ax.set_axis_off()
            if j == 1:
                ax.set_title(f"PSNR {p:.2f} dB  SSIM {ss:.3f}  L1 {l1:.4f}", fontsize=8)
            elif i == 0:
                ax.set_title(title, fontsize=9)
    path = out / f"panels_{direction}.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# sensitivity

def cmd_sensitivity(args) -> int:
    data_root = Path(args.data)
    if not data_root.is_dir():
        raise UsageError(f"data directory not found: {data_root}")
    dataset = load_paired_dataset(data_root, args.split, channels=args.channels)
    ckpts = {}
    for name, path in (("pix2pixA", args.pix2pixA), ("pix2pixB", args.pix2pixB),
                       ("one2one", args.one2one)):
        ckpt = load_checkpoint(path)
        if ckpt.mode != name:
            raise UsageError(f"checkpoint {path} has mode {ckpt.mode!r}, expected {name!r}")
        ckpts[name] = ckpt
    specs = {n: c.generator_spec for n, c in ckpts.items()}
    if len({(s.in_channels, s.out_channels, s.depth, s.base_filters, s.max_filters)
            for s in specs.values()}) != 1:
        raise UsageError(f"checkpoint generator specs disagree: {specs}")
    models = {n: Translator(generator_from_checkpoint(c)) for n, c in ckpts.items()}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    directions = ["A", "B"] if args.direction == "both" else [args.direction]
    metrics = args.metrics.split(",")
    reports = []
    outputs = []
    for direction in directions:
        for metric in metrics:
            cfg = SensitivityConfig(direction=direction, metric=metric, models=models)
            base_rep, one_rep = run_sensitivity(cfg, dataset)
            for rep in (base_rep, one_rep):
                stem = f"sensitivity_{direction}_{metric}_{rep.model}"
                rep.to_json(out / f"{stem}.json")
                rep.to_csv(out / f"{stem}.csv")
                outputs += [f"{stem}.json", f"{stem}.csv"]
                reports.append(rep)
    rows = sensitivity_summary(reports, directions=tuple(directions), metrics=tuple(metrics))
    summary_to_csv(rows, out / "summary.csv")
    (out / "summary.txt").write_text(summary_to_text(rows))
    outputs += ["summary.csv", "summary.txt"]
    print(summary_to_text(rows), end="")
    write_manifest(out, "sensitivity",
                   config={"direction": args.direction, "metrics": metrics, "split": args.split},
                   input_hashes={"data": _hash_dataset_dir(data_root),
                                 "pix2pixA": _sha256_file(Path(args.pix2pixA)),
                                 "pix2pixB": _sha256_file(Path(args.pix2pixB)),
                                 "one2one": _sha256_file(Path(args.one2one))},
                   outputs=outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# selfcheck

def _selfcheck_checks() -> dict:
    import torch

    checks = {}

    def loss_units():
        half = torch.full((1, 1, 4, 4), 0.5)
        d = float(discriminator_loss(half, half))
        g = float(generator_gan_loss(half))
        assert abs(d - 1.3862943611198906) < 1e-5, f"discriminator loss at 0.5: {d}"
        assert abs(g - 0.6931471805599453) < 1e-5, f"generator gan loss at 0.5: {g}"

    def metric_oracle():
        from skimage.metrics import peak_signal_noise_ratio, structural_similarity
        rng = np.random.default_rng(0)
        for _ in range(5):
            a = rng.random((32, 32))
            b = rng.random((32, 32))
            ours = psnr_metric(a, b, data_range=1.0)
            ref = peak_signal_noise_ratio(a, b, data_range=1.0)
            assert abs(ours - ref) < 1e-6, f"psnr {ours} vs reference {ref}"
            ours_s = ssim_metric(a, b, data_range=1.0)
            ref_s = structural_similarity(a, b, data_range=1.0, gaussian_weights=True,
                                          sigma=1.5, use_sample_covariance=False)
            assert abs(ours_s - ref_s) < 1e-4, f"ssim {ours_s} vs reference {ref_s}"

    def shape_program():
        import torch as t
        spec = GeneratorSpec(depth=4, base_filters=8, max_filters=32)
        g = build_generator(spec, 0).eval()
        with t.no_grad():
            out = g(t.zeros(1, 1, 16, 16))
        assert out.shape == (1, 1, 16, 16), f"generator shape {tuple(out.shape)}"
        d = build_discriminator(DiscriminatorSpec(in_channels=2), 0).eval()
        with t.no_grad():
            dm = d(t.zeros(1, 2, 256, 256))
        assert dm.shape == (1, 1, 30, 30), f"discriminator map {tuple(dm.shape)}"

    def gradient_check():
        errs = check_model_gradients(seed=0)
        for name, err in errs.items():
            assert err < 1e-4, f"{name} = {err:.2e} exceeds 1e-4"

    def alternation():
        from .data import SyntheticTaskSpec, batch_iter, generate_synthetic
        from .gradcheck import TINY_DISCRIMINATOR, TINY_GENERATOR
        from .training import TrainConfig, _build_state, train_step
        torch.manual_seed(0)
        cfg = TrainConfig(mode="one2one", batch_size=2, generator=TINY_GENERATOR,
                          discriminator=TINY_DISCRIMINATOR)
        ds = generate_synthetic(SyntheticTaskSpec(task="biased_negation", image_size=8,
                                                  n_samples=2, seed=0))
        state = _build_state(cfg)
        batch = next(batch_iter(ds, cfg.batch_size))
        dirs = [train_step(state, batch, cfg)[0] for _ in range(20)]
        assert dirs == ["A", "B"] * 10, f"direction sequence {dirs}"

    checks["loss_units"] = loss_units
    checks["metric_oracle"] = metric_oracle
    checks["shape_program"] = shape_program
    checks["gradient_check"] = gradient_check
    checks["alternation"] = alternation
    return checks


def cmd_selfcheck(args) -> int:
    checks = _selfcheck_checks()
    if args.induce_failure and args.induce_failure not in checks:
        raise UsageError(f"unknown check {args.induce_failure!r}; have {sorted(checks)}")
    failed = []
    for name, fn in checks.items():
        try:
            fn()
            if args.induce_failure == name:
                raise AssertionError("induced failure (test hook)")
            print(f"selfcheck {name}: PASS")
        except AssertionError as e:
            print(f"selfcheck {name}: FAIL — {e}")
            failed.append(name)
    if failed:
        print(f"selfcheck failed: {failed}")
        return EXIT_CHECK_FAILED
    print("selfcheck: all checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="selfinverse",
        description="Self-inverse bidirectional image-to-image translation toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic bijective paired dataset")
    sp.add_argument("--task", required=True, choices=["biased_negation", "gamma_swap"],
                    help="which involution-on-separable-domains task to generate")
    sp.add_argument("--size", type=int, default=64, help="square image size (power of 2)")
    sp.add_argument("--n", type=int, default=200, help="number of training pairs")
    sp.add_argument("--n-val", type=int, default=0, help="number of validation pairs")
    sp.add_argument("--n-test", type=int, default=0, help="number of test pairs")
    sp.add_argument("--seed", type=int, default=0, help="generation seed (bit-reproducible)")
    sp.add_argument("--texture", default="smoothed_noise", choices=["smoothed_noise", "shapes"])
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train one2one or a pix2pix baseline direction")
    tp.add_argument("--data", required=True, help="dataset root with trainA/trainB PNGs")
    tp.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    tp.add_argument("--config", help="flat JSON config file (CLI flags take precedence)")
    tp.add_argument("--resume", help="checkpoint to resume from (needs optimizer state)")
    tp.add_argument("--mode", choices=["one2one", "pix2pixA", "pix2pixB"],
                    help="one shared generator trained in both directions, or one baseline direction")
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--batch-size", dest="batch_size", type=int)
    tp.add_argument("--lr", type=float, help="Adam learning rate")
    tp.add_argument("--adam-beta1", dest="adam_beta1", type=float)
    tp.add_argument("--adam-beta2", dest="adam_beta2", type=float)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--lambda-l1", dest="lambda_l1", type=float,
                    help="weight of the L1 reconstruction term in the combined objective")
    tp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                    help="periodic checkpoint interval in generator steps (0 = final only)")
    tp.add_argument("--log-every", dest="log_every", type=int)
    tp.add_argument("--alternation", choices=["same_batch", "interleaved"],
                    help="one2one direction alternation: both directions per batch, or flip per batch")
    tp.add_argument("--depth", type=int, help="number of stride-2 downsamplings in the generator")
    tp.add_argument("--base-filters", dest="base_filters", type=int)
    tp.add_argument("--max-filters", dest="max_filters", type=int)
    tp.add_argument("--dropout-p", dest="dropout_p", type=float,
                    help="dropout probability in the first three decoder blocks")
    tp.add_argument("--channels", type=int, help="image channels (1 or 3)")
    tp.add_argument("--disc-filters", dest="disc_filters",
                    help="comma-separated discriminator filter schedule, e.g. 64,128,256,512")
    tp.add_argument("--jitter", action="store_const", const=True,
                    help="enable resize-then-random-crop augmentation")
    tp.add_argument("--load-size", dest="load_size", type=int)
    tp.add_argument("--crop-size", dest="crop_size", type=int)
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="score a checkpoint with L1/PSNR/SSIM per direction")
    ep.add_argument("--data", required=True)
    ep.add_argument("--split", default="val", choices=["train", "val", "test"])
    ep.add_argument("--channels", type=int, default=1)
    ep.add_argument("--checkpoint", help="generator checkpoint to evaluate")
    ep.add_argument("--direction", default="both", choices=["A2B", "B2A", "both"])
    ep.add_argument("--out", required=True)
    ep.add_argument("--panels", type=int, default=0,
                    help="write a PNG grid (input | output | target) for the first N samples")
    ep.add_argument("--stub", choices=["identity", "label"],
                    help="test hook: replace the generator with a known stub")
    ep.set_defaults(func=cmd_eval)

    np_ = sub.add_parser("sensitivity",
                         help="input-perturbation sensitivity comparison of the three models")
    np_.add_argument("--data", required=True)
    np_.add_argument("--split", default="val", choices=["train", "val", "test"])
    np_.add_argument("--channels", type=int, default=1)
    np_.add_argument("--pix2pixA", required=True, help="baseline checkpoint for direction A")
    np_.add_argument("--pix2pixB", required=True, help="baseline checkpoint for direction B")
    np_.add_argument("--one2one", required=True, help="shared-generator checkpoint")
    np_.add_argument("--direction", default="both", choices=["A", "B", "both"])
    np_.add_argument("--metrics", default="psnr,ssim",
                     help="comma-separated subset of psnr,ssim,l1")
    np_.add_argument("--out", required=True)
    np_.set_defaults(func=cmd_sensitivity)

    cp = sub.add_parser("selfcheck", help="fast invariant suite (losses, metrics, gradients)")
    cp.add_argument("--induce-failure", help="test hook: force the named check to fail")
    cp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, DatasetError, ModelSpecError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
