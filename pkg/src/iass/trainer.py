"""Adam optimization loop with fixed-chunk validation and early stopping."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, NumericalError
from .model import (Batch, IASSNet, LossTerms, ModelConfig, forward, init_model, load_checkpoint,
                    loss, loss_and_gradients, predicted_spectrogram, save_checkpoint)

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_mse", "val_bce")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 1000
    patience_epochs: int = 100
    steps_per_epoch: int = 500
    seed: int = 0
    alpha: float | None = None      # None: use ModelConfig.alpha
    min_delta: float = 1e-6
    validation_examples: int = 16
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.patience_epochs < 1:
            raise ConfigurationError("patience_epochs must be >= 1")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size, steps_per_epoch and max_epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_checkpoint(self) -> dict:
        return {"step": self.step,
                "m": {k: t.detach().cpu().numpy() for k, t in self.m.items()},
                "v": {k: t.detach().cpu().numpy() for k, t in self.v.items()}}

    @classmethod
    def from_checkpoint(cls, d: dict) -> "AdamState":
        return cls(int(d["step"]),
                   {k: torch.from_numpy(np.array(a)) for k, a in d["m"].items()},
                   {k: torch.from_numpy(np.array(a)) for k, a in d["v"].items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {tuple(g.shape)} != parameter shape "
                                     f"{tuple(p.shape)} for {name}")
        m = state.m.get(name, torch.zeros_like(p))
        v = state.v.get(name, torch.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


def parameters_of(net: IASSNet) -> dict:
    return {n: p.detach().clone() for n, p in net.named_parameters()}


@torch.no_grad()
def assign_parameters(net: IASSNet, params: dict):
    for n, p in net.named_parameters():
        p.copy_(params[n])


# --------------------------------------------------------------------------- steps

def optimizer_step(net: IASSNet, batch: Batch, state: AdamState, lr: float,
                   alpha: float) -> tuple[LossTerms, AdamState]:
    terms, grads = loss_and_gradients(net, batch, alpha)
    new_params, state = adam_step(parameters_of(net), grads, state, lr)
    assign_parameters(net, new_params)
    return terms, state


def fit_batch(net: IASSNet, batch: Batch, steps: int, lr: float = 1e-3, alpha: float = 0.1,
              state: AdamState | None = None) -> list[LossTerms]:
    """Repeatedly optimize on one fixed batch; returns the loss before each step."""
    state = state or AdamState()
    history = []
    for _ in range(steps):
        terms, state = optimizer_step(net, batch, state, lr, alpha)
        history.append(terms)
    return history


@torch.no_grad()
def validate(params: IASSNet, val_set: list, alpha: float) -> LossTerms:
    """Mean eval-mode loss over ``(mix_mag, target_mag, labels)`` triples.

    Parameters and batch-norm statistics are left untouched.
    """
    if not val_set:
        raise ConfigurationError("validation set is empty")
    was_training = params.training
    dtype = next(params.parameters()).dtype
    totals, mses, bces = [], [], []
    for mix, target, labels in val_set:
        mix_t = torch.as_tensor(mix, dtype=dtype)
        mask, logits = forward(params, mix_t, "eval")
        terms = loss(predicted_spectrogram(mask, mix_t), torch.as_tensor(target, dtype=dtype),
                     logits, torch.as_tensor(labels, dtype=dtype), alpha)
        totals.append(terms.total.item())
        mses.append(terms.mse.item())
        bces.append(terms.bce.item())
    params.train(was_training)
    return LossTerms(float(np.mean(totals)), float(np.mean(mses)), float(np.mean(bces)))


# --------------------------------------------------------------------------- early stopping

@dataclass
class EarlyStopping:
    """Stop once the monitored value has not improved by ``min_delta`` for
    ``patience`` consecutive epochs."""

    patience: int
    min_delta: float = 1e-6
    best: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True if it is the new best."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# --------------------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    checkpoint: Path
    last_checkpoint: Path
    history: list
    best_epoch: int
    stopped_early: bool
    optimizer_steps: int


def _write_history(path: Path, history: list):
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in HISTORY_FIELDS})


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _make_batch(sampler, rng, batch_size: int, dtype) -> Batch:
    feats = [sampler.features(rng) for _ in range(batch_size)]
    return Batch.from_arrays([f[0] for f in feats], [f[1] for f in feats], [f[2] for f in feats],
                             dtype)


def train(cfg: TrainConfig, model_cfg: ModelConfig, sampler, val_set: list, out_dir,
          resume=None) -> TrainResult:
    """Train until early stopping or ``max_epochs``.

    ``sampler`` provides ``features(rng) -> (mix_mag, target_mag, labels)``;
    ``val_set`` is a fixed list of such triples. Writes ``best.ckpt``,
    ``last.ckpt`` (each with a JSON sidecar) and ``history.csv`` to
    ``out_dir``. A non-finite loss aborts with :class:`NumericalError`, leaving
    the last good checkpoints in place.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not val_set:
        raise ConfigurationError("validation set is empty")
    alpha = model_cfg.alpha if cfg.alpha is None else cfg.alpha
    model_cfg.alpha = alpha
    best_path, last_path = out_dir / "best.ckpt", out_dir / "last.ckpt"

    if resume is not None:
        ck = load_checkpoint(resume)
        net = ck.model.to(cfg.torch_dtype)
        state = AdamState.from_checkpoint(ck.optimizer) if ck.optimizer else AdamState()
        state = AdamState(state.step, {k: v.to(cfg.torch_dtype) for k, v in state.m.items()},
                          {k: v.to(cfg.torch_dtype) for k, v in state.v.items()})
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        history = list(ck.extra.get("history", []))
        stopper = EarlyStopping(**ck.extra["early_stopping"])
        start_epoch = int(ck.extra["epoch"]) + 1
        log.info("resuming at epoch %d from %s", start_epoch, resume)
    else:
        net = init_model(model_cfg, cfg.seed, cfg.torch_dtype)
        state = AdamState()
        rng = np.random.default_rng(cfg.seed)
        history = []
        stopper = EarlyStopping(cfg.patience_epochs, cfg.min_delta)
        start_epoch = 1

    steps_done = 0
    epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        if stopper.should_stop:
            break
        losses = []
        for _ in range(cfg.steps_per_epoch):
            batch = _make_batch(sampler, rng, cfg.batch_size, cfg.torch_dtype)
            try:
                terms, state = optimizer_step(net, batch, state, cfg.learning_rate, alpha)
            except NumericalError as exc:
                good = last_path if last_path.exists() else None
                raise NumericalError(f"epoch {epoch}: {exc}; last good checkpoint: {good}") from exc
            losses.append(terms.total)
            steps_done += 1
        val = validate(net, val_set, alpha)
        if not all(map(math.isfinite, val)):
            raise NumericalError(f"epoch {epoch}: non-finite validation loss {val}")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val.total,
               "val_mse": val.mse, "val_bce": val.bce}
        history.append(row)
        improved = stopper.update(epoch, val.total)
        log.info("epoch %d train %.6g val %.6g%s", epoch, row["train_loss"], val.total,
                 " *" if improved else "")

        extra = {"epoch": epoch, "history": history, "early_stopping": asdict(stopper),
                 "train_config": asdict(cfg)}
        sidecar = {"epoch": epoch, "best_epoch": stopper.best_epoch, "best_val_loss": stopper.best,
                   "optimizer_steps": state.step, "train_config": asdict(cfg),
                   "model_config": model_cfg.to_dict()}
        if improved:
            save_checkpoint(best_path, net, state.to_checkpoint(), _rng_state(rng), extra, sidecar)
        save_checkpoint(last_path, net, state.to_checkpoint(), _rng_state(rng), extra, sidecar)
        _write_history(out_dir / "history.csv", history)
        if stopper.should_stop:
            break

    if not best_path.exists():
        raise ConfigurationError("training ran no epochs (max_epochs already reached)")
    (out_dir / "training.json").write_text(json.dumps(
        {"best_epoch": stopper.best_epoch, "epochs_run": len(history),
         "stopped_early": stopper.should_stop, "history": history}, indent=2))
    return TrainResult(best_path, last_path, history, stopper.best_epoch, stopper.should_stop,
                       steps_done)
