"""Alternating bidirectional training (one2one) and the fixed-direction baseline.

Every source of randomness is either the global torch stream (seeded once,
saved in checkpoints) or a counter-derived numpy stream keyed on
(seed, epoch, batch), so an interrupted run resumed from a checkpoint is
bit-identical to an uninterrupted one on CPU.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import AugmentConfig, Batch, PairedDataset, PairedSample, augment_pair, batch_iter
from .losses import LossBreakdown, LossConfig, discriminator_loss, generator_total_loss
from .models import (
    Checkpoint,
    CheckpointError,
    DiscriminatorSpec,
    GeneratorSpec,
    PatchDiscriminator,
    UnetGenerator,
    build_discriminator,
    build_generator,
    discriminator_forward,
    load_arrays_into,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)

ALTERNATIONS = ("same_batch", "interleaved")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, breakdown: LossBreakdown):
        super().__init__(
            f"non-finite loss at step {step}: d={breakdown.d_loss} "
            f"g_gan={breakdown.g_gan_loss} g_l1={breakdown.g_l1_loss}"
        )
        self.step = step
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    mode: str = "one2one"
    epochs: int = 1
    batch_size: int = 1
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig | None = None
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    log_every: int = 10
    alternation: str = "same_batch"
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec | None = None

    def __post_init__(self):
        if self.mode not in ("one2one", "pix2pixA", "pix2pixB"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")
        if self.alternation not in ALTERNATIONS:
            raise ValueError(f"unknown alternation {self.alternation!r}")
        if self.discriminator is None:
            # scale the patch discriminator with the generator base (64 -> 64-128-256-512)
            base = self.generator.base_filters
            self.discriminator = DiscriminatorSpec(
                in_channels=self.generator.in_channels + self.generator.out_channels,
                filter_schedule=tuple(base * 2 ** i for i in range(4)),
            )


@dataclass
class TrainState:
    mode: str
    generator: UnetGenerator
    discriminator: PatchDiscriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    direction_of_next_step: str = "A"
    pairs_consumed_epoch: int = 0
    pairs_consumed_total: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_rows: list[tuple]
    pairs_per_epoch: list[int]
    checkpoint_path: Path | None = None
    log_path: Path | None = None


def _update_discriminator(state: TrainState, inp: torch.Tensor, label: torch.Tensor,
                          fake: torch.Tensor) -> float:
    """Phase 1: discriminator step on real vs detached fake."""
    d_real = discriminator_forward(state.discriminator, inp, label)
    d_fake = discriminator_forward(state.discriminator, inp, fake.detach())
    loss = discriminator_loss(d_real, d_fake)
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_d.step()
    return float(loss.detach())


def _update_generator(state: TrainState, inp: torch.Tensor, label: torch.Tensor,
                      fake: torch.Tensor, loss_cfg: LossConfig) -> LossBreakdown:
    """Phase 2: generator step on the combined cGAN + L1 objective."""
    d_fake = discriminator_forward(state.discriminator, inp, fake)
    total, breakdown = generator_total_loss(d_fake, fake, label, loss_cfg)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    return breakdown


def step_direction(state: TrainState) -> str:
    if state.mode == "one2one":
        return state.direction_of_next_step
    return "A" if state.mode == "pix2pixA" else "B"


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> tuple[str, LossBreakdown]:
    """One two-phase adversarial step; one2one flips direction afterwards."""
    direction = step_direction(state)
    inp, label = (batch.x, batch.y) if direction == "A" else (batch.y, batch.x)
    state.generator.train()
    state.discriminator.train()
    fake = state.generator(inp)
    d_loss = _update_discriminator(state, inp, label, fake)
    breakdown = _update_generator(state, inp, label, fake, cfg.loss)
    breakdown.d_loss = d_loss
    state.step += 1
    state.pairs_consumed_epoch += inp.shape[0]
    state.pairs_consumed_total += inp.shape[0]
    if not all(np.isfinite(v) for v in
               (breakdown.d_loss, breakdown.g_gan_loss, breakdown.g_l1_loss)):
        raise TrainingDiverged(state.step, breakdown)
    if state.mode == "one2one":
        state.direction_of_next_step = "B" if direction == "A" else "A"
    return direction, breakdown


# ---------------------------------------------------------------------------
# optimizer / checkpoint plumbing

def _optimizer_arrays(opt: torch.optim.Adam, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                out[f"{prefix}.{idx}.{key}"] = val.detach().cpu().numpy()
            else:
                out[f"{prefix}.{idx}.{key}"] = np.asarray(val, dtype=np.int64)
    return out


def _restore_optimizer(opt: torch.optim.Adam, weights: dict[str, np.ndarray], prefix: str) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    found = False
    for name, arr in weights.items():
        if not name.startswith(prefix + "."):
            continue
        found = True
        _, idx, key = name.rsplit(".", 2)
        entry = state.setdefault(int(idx), {})
        t = torch.from_numpy(arr.copy())
        if key == "step" and t.ndim == 0 and t.dtype == torch.int64:
            entry[key] = int(t)
        else:
            entry[key] = t
    if not found:
        raise CheckpointError(
            f"checkpoint has no optimizer state under {prefix!r}; it can be used "
            "for inference but not for resuming"
        )
    sd["state"] = state
    opt.load_state_dict(sd)


def _build_state(cfg: TrainConfig) -> TrainState:
    init_rng = torch.Generator().manual_seed(cfg.seed)
    g = build_generator(cfg.generator, init_rng)
    d = build_discriminator(cfg.discriminator, init_rng)
    opt_g = _make_adam(g, cfg)
    opt_d = _make_adam(d, cfg)
    return TrainState(mode=cfg.mode, generator=g, discriminator=d, opt_g=opt_g, opt_d=opt_d)


def _make_adam(model, cfg: TrainConfig) -> torch.optim.Adam:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    try:
        # single-pass fused CPU kernel; ~20% faster per step than the default
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=betas, fused=True)
    except (RuntimeError, ValueError):
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=betas)


def state_to_checkpoint(state: TrainState, cfg: TrainConfig, with_optimizer: bool = True) -> Checkpoint:
    weights = {}
    weights.update(state_dict_to_arrays(state.generator, "generator"))
    weights.update(state_dict_to_arrays(state.discriminator, "discriminator"))
    if with_optimizer:
        weights.update(_optimizer_arrays(state.opt_g, "optim_g"))
        weights.update(_optimizer_arrays(state.opt_d, "optim_d"))
        weights["rng.torch_cpu"] = torch.get_rng_state().numpy()
    return Checkpoint(
        generator_spec=state.generator.spec,
        discriminator_spec=state.discriminator.spec,
        weights=weights,
        step=state.step,
        mode=state.mode,
        meta={
            "epoch": state.epoch,
            "batch_index": state.batch_index,
            "direction_of_next_step": state.direction_of_next_step,
            "seed": cfg.seed,
        },
    )


def resume(path: Path | str, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState (weights, optimizer moments, rng, counters) from disk."""
    ckpt = load_checkpoint(path)
    if ckpt.mode != cfg.mode:
        raise CheckpointError(f"checkpoint mode {ckpt.mode!r} != config mode {cfg.mode!r}")
    state = _build_state(cfg)
    load_arrays_into(state.generator, ckpt.weights, "generator")
    load_arrays_into(state.discriminator, ckpt.weights, "discriminator")
    _restore_optimizer(state.opt_g, ckpt.weights, "optim_g")
    _restore_optimizer(state.opt_d, ckpt.weights, "optim_d")
    if "rng.torch_cpu" not in ckpt.weights:
        raise CheckpointError("checkpoint has no rng state; cannot resume")
    torch.set_rng_state(torch.from_numpy(ckpt.weights["rng.torch_cpu"].copy()))
    state.step = ckpt.step
    state.epoch = int(ckpt.meta["epoch"])
    state.batch_index = int(ckpt.meta["batch_index"])
    state.direction_of_next_step = ckpt.meta["direction_of_next_step"]
    return state


def _augment_batch(batch: Batch, aug: AugmentConfig, rng: np.random.Generator) -> Batch:
    xs, ys = [], []
    for i, sid in enumerate(batch.ids):
        s = PairedSample(id=sid, x=batch.x[i:i + 1].numpy(), y=batch.y[i:i + 1].numpy())
        s = augment_pair(s, aug, rng)
        xs.append(s.x)
        ys.append(s.y)
    return Batch(x=torch.from_numpy(np.concatenate(xs)),
                 y=torch.from_numpy(np.concatenate(ys)), ids=batch.ids)


def train(cfg: TrainConfig, dataset: PairedDataset, out_dir: Path | str | None = None,
          resume_from: Path | str | None = None) -> TrainResult:
    """Run the full loop; emits periodic + final checkpoints and a CSV loss log."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = resume(resume_from, cfg)
    else:
        torch.manual_seed(cfg.seed)
        state = _build_state(cfg)

    loss_rows: list[tuple] = []
    pairs_per_epoch: list[int] = []
    log_path = out / "losses.csv" if out is not None else None
    log_file = None
    if log_path is not None:
        fresh = resume_from is None or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        log_writer = csv.writer(log_file)
        if fresh:
            log_writer.writerow(["step", "direction", "d_loss", "g_gan", "g_l1", "g_total"])

    def record(direction: str, bd: LossBreakdown):
        if (state.step - 1) % cfg.log_every == 0:
            row = (state.step, direction, bd.d_loss, bd.g_gan_loss, bd.g_l1_loss, bd.g_total)
            loss_rows.append(row)
            if log_file is not None:
                log_writer.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])
                log_file.flush()

    last_ckpt_step = state.step
    start_epoch, start_batch = state.epoch, state.batch_index
    try:
        for epoch in range(start_epoch, cfg.epochs):
            state.epoch = epoch
            if epoch != start_epoch or start_batch == 0:
                state.pairs_consumed_epoch = 0
            ep_rng = np.random.default_rng([cfg.seed, 1000003, epoch])
            for b_idx, batch in enumerate(
                    batch_iter(dataset, cfg.batch_size, shuffle=True, rng=ep_rng)):
                if epoch == start_epoch and b_idx < start_batch:
                    continue
                if cfg.augment is not None:
                    aug_rng = np.random.default_rng([cfg.seed, 2000003, epoch, b_idx])
                    batch = _augment_batch(batch, cfg.augment, aug_rng)
                if cfg.mode == "one2one" and cfg.alternation == "same_batch":
                    record(*train_step(state, batch, cfg))
                    record(*train_step(state, batch, cfg))
                else:
                    record(*train_step(state, batch, cfg))
                state.batch_index = b_idx + 1
                if (out is not None and cfg.checkpoint_every > 0
                        and state.step - last_ckpt_step >= cfg.checkpoint_every):
                    save_checkpoint(state_to_checkpoint(state, cfg),
                                    out / f"step_{state.step:07d}.ckpt")
                    last_ckpt_step = state.step
            state.batch_index = 0
            state.epoch = epoch + 1
            pairs_per_epoch.append(state.pairs_consumed_epoch)
    finally:
        if log_file is not None:
            log_file.close()

    ckpt = state_to_checkpoint(state, cfg)
    ckpt_path = None
    if out is not None:
        ckpt_path = out / "final.ckpt"
        save_checkpoint(ckpt, ckpt_path)
    return TrainResult(checkpoint=ckpt, loss_rows=loss_rows,
                       pairs_per_epoch=pairs_per_epoch,
                       checkpoint_path=ckpt_path, log_path=log_path)
