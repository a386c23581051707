"""SGD-with-momentum training under a poly schedule, and Dice evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig, format_config
from .data import VolumeSample, synth_dataset
from .errors import ContractError, DimensionError, NumericError
from .losses import class_softmax, combined_loss, dice_score
from .model import Model, build_model, forward
from .tensor import Tensor, backward, current_tape, no_grad

log = logging.getLogger(__name__)


def poly_lr(step: int, run: RunConfig) -> float:
    """``lr0 * (1 - step / T) ** p``."""
    if step < 0 or step > run.steps:
        raise ContractError(f"step {step} outside [0, {run.steps}]")
    return run.lr * (1.0 - step / run.steps) ** run.poly_power


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      velocity: Sequence[np.ndarray], lr: float, momentum: float,
                      weight_decay: float):
    """``v <- m*v + (g + wd*theta)``; ``theta <- theta - lr*v``.  Arrays are updated in place."""
    if not len(params) == len(grads) == len(velocity):
        raise DimensionError("params, grads and velocity differ in length")
    for theta, g, v in zip(params, grads, velocity):
        if theta.shape != g.shape or theta.shape != v.shape:
            raise DimensionError(f"shape mismatch {theta.shape} / {g.shape} / {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * theta
        theta -= lr * v
    return params, velocity


@dataclass
class LogRecord:
    step: int
    lr: float
    loss: float

    def to_line(self) -> str:
        return json.dumps({"step": self.step, "lr": self.lr, "loss": self.loss})

    @classmethod
    def from_line(cls, line: str) -> "LogRecord":
        d = json.loads(line)
        return cls(int(d["step"]), float(d["lr"]), float(d["loss"]))


@dataclass
class EvalReport:
    records: list[dict]  # {"case", "class", "dsc"}
    per_class: dict[int, float]
    mean: float

    def lines(self) -> list[str]:
        return [json.dumps(r) for r in self.records]

    def format_table(self) -> str:
        rows = [f"{'class':>5}  {'mean DSC':>9}"]
        rows += [f"{c:>5}  {v:>9.4f}" for c, v in self.per_class.items()]
        rows.append(f"{'mean':>5}  {self.mean:>9.4f}")
        return "\n".join(rows)


def predict_labels(model: Model, sample: VolumeSample) -> np.ndarray:
    with no_grad():
        logits = forward(model, Tensor(sample.image))
    return np.argmax(logits.data, axis=0)


def evaluate(model: Model, dataset: Sequence[VolumeSample],
             predictor: Callable[[VolumeSample], np.ndarray] | None = None) -> EvalReport:
    """Per-case, per-foreground-class DSC of argmax predictions (batch size 1).

    The mean is taken over samples first, then over classes.
    """
    cfg = model.config
    predictor = predictor or (lambda s: predict_labels(model, s))
    records = []
    for case, sample in enumerate(dataset):
        if sample.dims != tuple(cfg.input_dims):
            raise DimensionError(f"case {case}: dims {sample.dims} != config {cfg.input_dims}")
        pred = predictor(sample)
        for c in range(1, cfg.num_classes):
            records.append({"case": case, "class": c,
                            "dsc": dice_score(pred, sample.labels, c, cfg.num_classes)})
    per_class = {c: float(np.mean([r["dsc"] for r in records if r["class"] == c]))
                 for c in range(1, cfg.num_classes)}
    return EvalReport(records, per_class, float(np.mean(list(per_class.values()))))


def split_dataset(samples: Sequence[VolumeSample], val_fraction: float):
    """Deterministic split: the last ``ceil(val_fraction * n)`` samples are held out."""
    n = len(samples)
    n_val = max(1, int(np.ceil(val_fraction * n)))
    if n - n_val < 1:
        raise ContractError(f"{n} samples cannot provide both training and held-out data")
    return list(samples[:n - n_val]), list(samples[n - n_val:])


@dataclass
class TrainResult:
    model: Model
    log: list[LogRecord]
    best_dsc: float
    best_step: int
    best_state: dict[str, np.ndarray]
    evals: list[tuple[int, float]] = field(default_factory=list)


def train_step(model: Model, batch: Sequence[VolumeSample], velocity, lr: float,
               run: RunConfig) -> float:
    current_tape().reset()
    probs = [class_softmax(forward(model, Tensor(s.image))) for s in batch]
    loss = combined_loss(probs, [s.labels for s in batch])
    value = float(loss.data)
    grads = backward(loss)
    params = model.parameters()
    sgd_momentum_step([p.data for p in params],
                      [grads.get(p, np.zeros(p.shape)) for p in params],
                      velocity, lr, run.momentum, run.weight_decay)
    return value


def train(run: RunConfig, samples: Sequence[VolumeSample] | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Deterministic training loop.

    Batches are sequential draws from a per-epoch seeded shuffle of the
    training split.  The held-out split is evaluated every ``eval_every``
    steps and at the end; the best state by mean DSC is kept.
    """
    run.validate()
    cfg = run.model
    if samples is None:
        samples = synth_dataset(run.seed, run.data_count, cfg.input_dims, run.data_kind,
                                cfg.num_classes, run.data_noise)
    train_set, val_set = split_dataset(samples, run.val_fraction)
    model = build_model(cfg, run.seed)
    velocity = [np.zeros(p.shape) for p in model.parameters()]
    rng = np.random.default_rng([run.seed, 1])
    order: list[int] = []
    records: list[LogRecord] = []
    evals: list[tuple[int, float]] = []
    best = (-1.0, -1, model.state_dict())
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.cfg").write_text(format_config(run))
        log_file = (out / "metrics.jsonl").open("w")
    try:
        for step in range(run.steps):
            batch = []
            while len(batch) < run.batch_size:
                if not order:
                    order = list(rng.permutation(len(train_set)))
                batch.append(train_set[order.pop(0)])
            lr = poly_lr(step, run)
            try:
                loss = train_step(model, batch, velocity, lr, run)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericError(f"step {step}: non-finite loss {loss}")
            rec = LogRecord(step, lr, loss)
            records.append(rec)
            if log_file is not None:
                log_file.write(rec.to_line() + "\n")
            if (step + 1) % run.eval_every == 0 or step + 1 == run.steps:
                dsc = evaluate(model, val_set).mean
                evals.append((step, dsc))
                log.info("step %d lr %.5f loss %.5f val DSC %.4f", step, lr, loss, dsc)
                if dsc > best[0]:
                    best = (dsc, step, {k: v.copy() for k, v in model.state_dict().items()})
    finally:
        if log_file is not None:
            log_file.close()
    result = TrainResult(model, records, best[0], best[1], best[2], evals)
    if out is not None:
        save_checkpoint(out / "final.ckpt", model, {"step": run.steps, "kind": "final"})
        best_model = build_model(cfg, run.seed)
        best_model.load_state_dict(result.best_state)
        save_checkpoint(out / "best.ckpt", best_model,
                        {"step": result.best_step, "kind": "best", "dsc": result.best_dsc})
    return result


def read_log(path: str | Path) -> list[LogRecord]:
    return [LogRecord.from_line(line) for line in Path(path).read_text().splitlines() if line]
