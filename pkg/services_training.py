import csv
import logging
import math
import time
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Union

import numpy as np

from config import CHECKPOINT_FILENAME, LOSS_CSV_FILENAME
from models_checkpoint import Checkpoint, save_checkpoint
from models_networks import AdamState, ModelParams, build_models, forward_discriminator, forward_generator
from models_schemas import EpochRecord, LossHistory, Task, TrainConfig
from services_autodiff import (
    DTYPE,
    ShapeMismatchError,
    Tensor,
    backward,
    bce_with_logits,
    concat_channels,
    l1_loss,
)
from services_data import PairedDataset, UnpairedDataset, stack_batch, to_unpaired

logger = logging.getLogger(__name__)

STABILITY_WINDOW = 10
LOSS_COLUMNS = ("epoch", "g_loss", "d_loss", "g_adv", "g_l1", "g_cycle")


class NonFiniteLossError(ValueError):
    """A loss term became NaN or infinite."""

    def __init__(self, epoch: int, term: str, value: float):
        self.epoch = epoch
        self.term = term
        self.value = value
        super().__init__(f"Loss term {term} is not finite ({value}) in epoch {epoch}")


# ---------- Adam ----------

def adam_step(
    params: ModelParams,
    grads: Optional[Dict[str, np.ndarray]],
    state: AdamState,
    cfg: TrainConfig,
) -> AdamState:
    """One bias-corrected Adam update of every parameter; ``grads=None`` reads ``.grad``."""
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for name, tensor in params.items():
        g = tensor.grad if grads is None else grads.get(name)
        if g is None:
            raise ShapeMismatchError(f"No gradient for parameter {name}")
        if g.shape != tensor.shape:
            raise ShapeMismatchError(f"Gradient for {name} has shape {g.shape}, parameter has {tensor.shape}")
        g = g.astype(DTYPE, copy=False)

        m = state.m[name] = (DTYPE(b1) * state.m[name] + DTYPE(1.0 - b1) * g).astype(DTYPE)
        v = state.v[name] = (DTYPE(b2) * state.v[name] + DTYPE(1.0 - b2) * g * g).astype(DTYPE)
        m_hat = m / DTYPE(correction1)
        v_hat = v / DTYPE(correction2)
        tensor.data = (tensor.data - DTYPE(cfg.learning_rate) * m_hat / (np.sqrt(v_hat) + DTYPE(cfg.adam_eps))).astype(DTYPE)

    state.t = t
    return state


class Adam:
    """Adam bound to one network."""

    def __init__(self, params: ModelParams, cfg: TrainConfig, state: Optional[AdamState] = None):
        self.params = params
        self.cfg = cfg
        self.state = state if state is not None else AdamState.zeros(params)

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        self.state = adam_step(self.params, None, self.state, self.cfg)


# ---------- Adversarial steps ----------

class CganLosses(NamedTuple):
    d_loss: float
    g_loss: float
    g_adv: float
    g_l1: float
    d_real: float
    d_fake: float


class CycleGanLosses(NamedTuple):
    d_loss: float
    g_loss: float
    g_adv: float
    g_cycle: float
    adv_ab: float
    adv_ba: float
    cycle_a: float
    cycle_b: float
    d_a_real: float
    d_a_fake: float
    d_b_real: float
    d_b_fake: float


def _real(logits: Tensor) -> Tensor:
    return bce_with_logits(logits, np.ones(logits.shape, dtype=DTYPE))


def _fake(logits: Tensor) -> Tensor:
    return bce_with_logits(logits, np.zeros(logits.shape, dtype=DTYPE))


def cgan_step(
    gen: ModelParams,
    disc: ModelParams,
    image: Tensor,
    mask: Tensor,
    cfg: TrainConfig,
    optimizers: Dict[str, Adam],
    rng: Optional[np.random.Generator] = None,
) -> CganLosses:
    """Discriminator update on a detached fake, then generator update against the updated discriminator."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    fake = forward_generator(gen, image, training=True, rng=rng)

    disc.zero_grad()
    d_real = _real(forward_discriminator(disc, concat_channels(image, mask)))
    d_fake = _fake(forward_discriminator(disc, concat_channels(image, fake.detach())))
    d_loss = (d_real + d_fake) * 0.5
    backward(d_loss, disc)
    optimizers["discriminator"].step()

    gen.zero_grad()
    with disc.frozen():
        g_adv = _real(forward_discriminator(disc, concat_channels(image, fake)))
        g_l1 = l1_loss(fake, mask)
        g_loss = g_adv + g_l1 * cfg.lambda_l1
        backward(g_loss, gen)
    optimizers["generator"].step()

    return CganLosses(
        d_loss=d_loss.item(),
        g_loss=g_loss.item(),
        g_adv=g_adv.item(),
        g_l1=g_l1.item(),
        d_real=d_real.item(),
        d_fake=d_fake.item(),
    )


def cyclegan_step(
    gen_ab: ModelParams,
    gen_ba: ModelParams,
    disc_a: ModelParams,
    disc_b: ModelParams,
    a: Tensor,
    b: Tensor,
    cfg: TrainConfig,
    optimizers: Dict[str, Adam],
    rng: Optional[np.random.Generator] = None,
) -> CycleGanLosses:
    """Joint update of both generators, then one update per domain discriminator."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    gen_ab.zero_grad()
    gen_ba.zero_grad()
    with disc_a.frozen(), disc_b.frozen():
        fake_b = forward_generator(gen_ab, a, training=True, rng=rng)
        fake_a = forward_generator(gen_ba, b, training=True, rng=rng)
        adv_ab = _real(forward_discriminator(disc_b, fake_b))
        adv_ba = _real(forward_discriminator(disc_a, fake_a))
        g_loss = adv_ab + adv_ba

        if cfg.lambda_cycle > 0:
            cycle_a = l1_loss(forward_generator(gen_ba, fake_b, training=True, rng=rng), a)
            cycle_b = l1_loss(forward_generator(gen_ab, fake_a, training=True, rng=rng), b)
            g_loss = g_loss + (cycle_a + cycle_b) * cfg.lambda_cycle
        else:
            # Reported only: computed off the graph so no gradient flows through it
            with gen_ab.frozen(), gen_ba.frozen():
                cycle_a = l1_loss(forward_generator(gen_ba, fake_b.detach(), training=True, rng=rng), a)
                cycle_b = l1_loss(forward_generator(gen_ab, fake_a.detach(), training=True, rng=rng), b)

        backward(g_loss, list(gen_ab) + list(gen_ba))
    optimizers["gen_ab"].step()
    optimizers["gen_ba"].step()

    d_terms = {}
    for role, disc, real, fake in (("disc_a", disc_a, a, fake_a), ("disc_b", disc_b, b, fake_b)):
        disc.zero_grad()
        d_real = _real(forward_discriminator(disc, real))
        d_fake = _fake(forward_discriminator(disc, fake.detach()))
        d_loss = (d_real + d_fake) * 0.5
        backward(d_loss, disc)
        optimizers[role].step()
        d_terms[role] = (d_loss.item(), d_real.item(), d_fake.item())

    return CycleGanLosses(
        d_loss=d_terms["disc_a"][0] + d_terms["disc_b"][0],
        g_loss=g_loss.item(),
        g_adv=adv_ab.item() + adv_ba.item(),
        g_cycle=cycle_a.item() + cycle_b.item(),
        adv_ab=adv_ab.item(),
        adv_ba=adv_ba.item(),
        cycle_a=cycle_a.item(),
        cycle_b=cycle_b.item(),
        d_a_real=d_terms["disc_a"][1],
        d_a_fake=d_terms["disc_a"][2],
        d_b_real=d_terms["disc_b"][1],
        d_b_fake=d_terms["disc_b"][2],
    )


# ---------- Training loop ----------

def _check_finite(losses: NamedTuple, epoch: int) -> None:
    for term, value in losses._asdict().items():
        if not math.isfinite(value):
            logger.error(f"Aborting: {term}={value} in epoch {epoch}")
            raise NonFiniteLossError(epoch, term, value)


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _epoch_record(epoch: int, task: Task, steps: List[NamedTuple]) -> EpochRecord:
    def mean(term: str) -> float:
        return float(np.mean([getattr(s, term) for s in steps]))

    return EpochRecord(
        epoch=epoch,
        g_loss=mean("g_loss"),
        d_loss=mean("d_loss"),
        g_adv=mean("g_adv"),
        g_l1=mean("g_l1") if task == Task.CGAN else None,
        g_cycle=mean("g_cycle") if task == Task.CYCLEGAN else None,
    )


def _run_cgan_epoch(models, optimizers, ds: PairedDataset, cfg, epoch, shuffle_rng, dropout_rng) -> List[CganLosses]:
    steps = []
    for batch in _batches(shuffle_rng.permutation(len(ds)), cfg.batch_size):
        image = stack_batch([ds[int(i)].image for i in batch])
        mask = stack_batch([ds[int(i)].mask for i in batch])
        losses = cgan_step(models["generator"], models["discriminator"], image, mask, cfg, optimizers, dropout_rng)
        _check_finite(losses, epoch)
        steps.append(losses)
    return steps


def _run_cyclegan_epoch(models, optimizers, ds: UnpairedDataset, cfg, epoch, shuffle_rng, dropout_rng) -> List[CycleGanLosses]:
    n_a, n_b = len(ds.domain_a), len(ds.domain_b)
    order_a = shuffle_rng.permutation(n_a)
    order_b = shuffle_rng.permutation(n_b)
    # Every A sample is visited once; the B pool is cycled if it is smaller
    steps = []
    for batch in _batches(np.arange(max(n_a, n_b)), cfg.batch_size):
        a = stack_batch([ds.domain_a[int(order_a[i % n_a])] for i in batch])
        b = stack_batch([ds.domain_b[int(order_b[i % n_b])] for i in batch])
        losses = cyclegan_step(
            models["gen_ab"], models["gen_ba"], models["disc_a"], models["disc_b"],
            a, b, cfg, optimizers, dropout_rng,
        )
        _check_finite(losses, epoch)
        steps.append(losses)
    return steps


def _snapshot(cfg: TrainConfig, models: Dict[str, ModelParams], optimizers: Dict[str, Adam], history: LossHistory) -> Checkpoint:
    """Checkpoint with copied arrays, so later updates cannot leak into it."""
    copied_models = {
        role: ModelParams.from_arrays(params.kind, params.config, params.snapshot())
        for role, params in models.items()
    }
    copied_states = {
        role: AdamState(
            m={k: v.copy() for k, v in opt.state.m.items()},
            v={k: v.copy() for k, v in opt.state.v.items()},
            t=opt.state.t,
        )
        for role, opt in optimizers.items()
    }
    return Checkpoint(
        config=cfg,
        models=copied_models,
        optimizers=copied_states,
        history=LossHistory(records=list(history.records)),
    )


def train(
    cfg: TrainConfig,
    train_ds: Union[PairedDataset, UnpairedDataset],
    out_dir: Optional[Union[str, Path]] = None,
) -> Checkpoint:
    """Run ``cfg.epochs`` epochs and return the final checkpoint.

    CycleGAN accepts a paired dataset and unpairs it with ``cfg.seed``. With
    ``out_dir`` set, checkpoints are written every ``cfg.checkpoint_every``
    epochs and at the end, together with the loss CSV.
    """
    if cfg.task == Task.CYCLEGAN and isinstance(train_ds, PairedDataset):
        train_ds = to_unpaired(train_ds, cfg.seed)
    size = len(train_ds) if isinstance(train_ds, PairedDataset) else len(train_ds.domain_a)
    if size == 0 or (isinstance(train_ds, UnpairedDataset) and not train_ds.domain_b):
        raise ValueError("Cannot train on an empty dataset")
    if cfg.task == Task.CGAN and not isinstance(train_ds, PairedDataset):
        raise ValueError("CGAN training needs a paired dataset")

    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    models = build_models(cfg, np.random.default_rng(init_seq))
    optimizers = {role: Adam(params, cfg) for role, params in models.items()}
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    run_epoch = _run_cgan_epoch if cfg.task == Task.CGAN else _run_cyclegan_epoch

    out_path = Path(out_dir) if out_dir is not None else None
    history = LossHistory()
    logger.info(f"Training {cfg.task.value} for {cfg.epochs} epochs on {size} samples (seed {cfg.seed})")
    started = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        steps = run_epoch(models, optimizers, train_ds, cfg, epoch, shuffle_rng, dropout_rng)
        record = _epoch_record(epoch, cfg.task, steps)
        history.records.append(record)

        extra = f" g_l1={record.g_l1:.4f}" if record.g_l1 is not None else f" g_cycle={record.g_cycle:.4f}"
        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: g_loss={record.g_loss:.4f} d_loss={record.d_loss:.4f} "
            f"g_adv={record.g_adv:.4f}{extra}"
        )

        if out_path is not None and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(_snapshot(cfg, models, optimizers, history), out_path / f"checkpoint_epoch{epoch:03d}.mgan")

    ckpt = _snapshot(cfg, models, optimizers, history)
    if out_path is not None:
        save_checkpoint(ckpt, out_path / CHECKPOINT_FILENAME)
        write_loss_csv(history, out_path / LOSS_CSV_FILENAME)

    logger.info(f"Training finished in {time.perf_counter() - started:.1f}s")
    return ckpt


# ---------- Loss history reporting ----------

def loss_stability(history: LossHistory, window: int = STABILITY_WINDOW) -> Dict[str, float]:
    """Standard deviation of each loss over the last ``window`` epochs."""
    tail = history.records[-window:]
    stability = {}
    for term in LOSS_COLUMNS[1:]:
        values = [getattr(r, term) for r in tail if getattr(r, term) is not None]
        if values:
            stability[term] = float(np.std(values))
    return stability


def write_loss_csv(history: LossHistory, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for record in history.records:
            writer.writerow(["" if getattr(record, c) is None else getattr(record, c) for c in LOSS_COLUMNS])
    return target
