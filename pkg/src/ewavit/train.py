"""Training, fine-tuning, evaluation, offline conversion and latency benchmarking."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .config import TrainConfig, save_config
from .data import ArrayDataset, load_dataset
from .ewa import PlacementPolicy, ShareSchedule, apply_ewa, build_ewa_model, convert_model, expert_spread, schedule_beta
from .optim import OptimizerState, cosine_lr, step_model
from .tensor import backward, soft_cross_entropy
from .vit import Model, copy_model, init_vit, model_forward

log = logging.getLogger("ewavit")

STEP_FIELDS = ("step", "epoch", "lr", "loss", "aux", "beta", "ewa_calls", "seconds")
EPOCH_FIELDS = ("epoch", "steps", "train_loss", "beta", "eval_loss", "eval_acc", "moe_eval_acc",
                "expert_spread", "step_seconds")


class DivergenceError(FloatingPointError):
    """Raised when the loss stops being finite; the last good weights are saved first."""


@dataclass
class RunResult:
    model: Model
    checkpoint: Checkpoint
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1]["eval_acc"] if self.epochs else float("nan")


def smoothed_targets(labels: np.ndarray, n_classes: int, smoothing: float) -> np.ndarray:
    out = np.full((len(labels), n_classes), smoothing / n_classes)
    out[np.arange(len(labels)), labels] += 1.0 - smoothing
    return out


def evaluate(model: Model, dataset: ArrayDataset, batch_size: int = 256) -> tuple[float, float]:
    """Unsmoothed cross-entropy and accuracy in eval mode (no dropout)."""
    total_loss, correct = 0.0, 0
    for images, labels in dataset.batches(batch_size, shuffle=False):
        logits = model_forward(model, images, "eval").data
        logp = logits - logits.max(axis=1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
        total_loss -= logp[np.arange(len(labels)), labels].sum()
        correct += int((logits.argmax(axis=1) == labels).sum())
    n = len(dataset)
    return total_loss / n, correct / n


def build_model(cfg: TrainConfig, rng: np.random.Generator, source: Model | None = None) -> Model:
    if not cfg.uses_moe:
        if source is not None:
            return copy_model(source)
        return init_vit(cfg.model, rng)
    m = cfg.moe
    return build_ewa_model(cfg.model, PlacementPolicy(m.placement, cfg.model.depth), m.num_experts, m.mode,
                           rng, source, m.k, m.capacity_ratio, m.balance_weight)


def make_schedule(cfg: TrainConfig, num_epochs: int, total_steps: int) -> ShareSchedule:
    """Fix the schedule horizon: the last epoch index, or the last step index."""
    last = num_epochs - 1 if cfg.ewa.granularity == "epoch" else total_steps - 1
    return dataclasses.replace(cfg.ewa, horizon=max(last, 1))


def _augment(images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    k = cfg.model.n_classes
    targets = smoothed_targets(labels, k, cfg.label_smoothing)
    if cfg.dataset.hflip:
        flip = rng.random(len(images)) < 0.5
        images = images.copy()
        images[flip] = images[flip][..., ::-1]
    if cfg.dataset.mixup_alpha > 0:
        lam = rng.beta(cfg.dataset.mixup_alpha, cfg.dataset.mixup_alpha)
        perm = rng.permutation(len(images))
        images = lam * images + (1 - lam) * images[perm]
        targets = lam * targets + (1 - lam) * targets[perm]
    return images, targets


def train_step(model: Model, images: np.ndarray, targets: np.ndarray, rng: np.random.Generator,
               state: OptimizerState, lr: float, cfg: TrainConfig, beta: float) -> tuple[float, float]:
    """Forward, backward, optimizer update, then one averaging step on every MoE layer."""
    logits, aux = model_forward(model, images, "train", rng, return_aux=True)
    task = soft_cross_entropy(logits, targets)
    loss = task + aux if aux is not None else task
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    backward(loss)
    step_model(model.named_parameters(), state, lr, cfg.optimizer)
    for layer in model.moe_layers():
        apply_ewa(layer, beta)
    return task.item(), aux.item() if aux is not None else 0.0


def _rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    init, step, aug = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(step), np.random.default_rng(aug)


def _write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)


def _attach_log(out_dir: Path | None) -> logging.Handler | None:
    if out_dir is None:
        return None
    handler = logging.FileHandler(out_dir / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def _load_data(cfg: TrainConfig, base_dir) -> tuple[ArrayDataset, ArrayDataset]:
    train_ds = load_dataset(cfg.dataset.train, base_dir)
    test_ds = load_dataset(cfg.dataset.test, base_dir)
    for name, ds in (("train", train_ds), ("test", test_ds)):
        if ds.image_shape != (cfg.model.in_chans, cfg.model.image_size, cfg.model.image_size):
            raise ValueError(f"{name} images {ds.image_shape} do not fit model input "
                             f"{(cfg.model.in_chans, cfg.model.image_size, cfg.model.image_size)}")
        if ds.n_classes > cfg.model.n_classes:
            raise ValueError(f"{name} set has {ds.n_classes} classes, model head has {cfg.model.n_classes}")
    return train_ds, test_ds


def train(cfg: TrainConfig, out_dir: str | Path | None = None, source: Checkpoint | None = None,
          base_dir: str | Path | None = None) -> RunResult:
    """Train from scratch, or from a dense ``source`` checkpoint when fine-tuning."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")
    handler = _attach_log(out)
    try:
        return _run(cfg, out, source, base_dir)
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def finetune(cfg: TrainConfig, source: Checkpoint, out_dir: str | Path | None = None,
             base_dir: str | Path | None = None) -> RunResult:
    """Expand a dense checkpoint into MoE form and train with a per-step share schedule."""
    if source.is_moe:
        raise ValueError("fine-tuning needs a dense checkpoint; convert it first")
    cfg = dataclasses.replace(cfg, ewa=dataclasses.replace(cfg.ewa, granularity="step"))
    return train(cfg, out_dir, source, base_dir)


def _run(cfg: TrainConfig, out: Path | None, source: Checkpoint | None, base_dir) -> RunResult:
    init_rng, step_rng, aug_rng = _rng_streams(cfg.seed)
    train_ds, test_ds = _load_data(cfg, base_dir)
    src_model = None
    if source is not None:
        src_model = ckpt_io.to_model(source)
        if src_model.config != cfg.model:
            raise ValueError("source checkpoint model config differs from the run config: "
                             f"{src_model.config} vs {cfg.model}")
    model = build_model(cfg, init_rng, src_model)

    per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    total = cfg.steps if cfg.steps > 0 else cfg.epochs * per_epoch
    num_epochs = math.ceil(total / per_epoch)
    warmup = cfg.lr_schedule.warmup_steps or int(round(cfg.lr_schedule.warmup_epochs * per_epoch))
    schedule = make_schedule(cfg, num_epochs, total)
    state = OptimizerState()
    provenance = "fine-tuned from dense checkpoint" if source is not None else "trained from scratch"
    log.info("params=%d moe_blocks=%s steps=%d epochs=%d warmup=%d", model.num_params(),
             model.moe_blocks, total, num_epochs, warmup)

    steps, epochs = [], []
    last_good = {n: t.data.copy() for n, t in model.named_parameters().items()}
    step = 0
    for epoch in range(num_epochs):
        order = np.random.default_rng([cfg.seed, train_ds.seed, epoch]).permutation(len(train_ds))
        losses, times, beta = [], [], 0.0
        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            idx = order[start:start + cfg.batch_size]
            images, targets = _augment(train_ds.images[idx], train_ds.labels[idx], cfg, aug_rng)
            lr = cosine_lr(step, total, warmup, cfg.optimizer.lr)
            beta = schedule_beta(schedule, epoch if schedule.granularity == "epoch" else step)
            t0 = time.perf_counter()
            try:
                loss, aux = train_step(model, images, targets, step_rng, state, lr, cfg, beta)
            except FloatingPointError as exc:
                _diverged(model, last_good, cfg, step, epoch, out, str(exc))
            dt = time.perf_counter() - t0
            last_good = {n: t.data.copy() for n, t in model.named_parameters().items()}
            row = {"step": step, "epoch": epoch, "lr": lr, "loss": loss, "aux": aux, "beta": beta,
                   "ewa_calls": len(model.moe_blocks), "seconds": dt}
            steps.append(row)
            losses.append(loss)
            times.append(dt)
            step += 1
        last = epoch == num_epochs - 1
        if last or (cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0):
            epochs.append(_epoch_row(model, test_ds, cfg, epoch, step, losses, beta, times))
            log.info(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                              for k, v in epochs[-1].items()))

    model.training_meta = {"step": step, "epoch": num_epochs}
    rng_state = {"seed": cfg.seed, "step_rng": step_rng.bit_generator.state}
    result_ckpt = ckpt_io.from_model(model, cfg.to_dict(), step, num_epochs, rng_state, provenance)
    if out is not None:
        ckpt_io.save(out / "model.ewac", result_ckpt)
        ckpt_io.save(out / "converted.ewac", convert_checkpoint(result_ckpt))
        _write_csv(out / "steps.csv", STEP_FIELDS, steps)
        _write_csv(out / "epochs.csv", EPOCH_FIELDS, epochs)
        summary = {"final_eval_acc": epochs[-1]["eval_acc"], "final_eval_loss": epochs[-1]["eval_loss"],
                   "steps": step, "epochs": num_epochs, "params": model.num_params(),
                   "converted_params": convert_model(model).num_params()}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(model, result_ckpt, steps, epochs, out)


def _epoch_row(model, test_ds, cfg, epoch, step, losses, beta, times) -> dict:
    dense = convert_model(model)
    eval_loss, eval_acc = evaluate(dense, test_ds, cfg.eval_batch_size)
    if model.moe_blocks:
        _, moe_acc = evaluate(model, test_ds, cfg.eval_batch_size)
        spread = float(np.mean([expert_spread(layer) for layer in model.moe_layers()]))
    else:
        moe_acc, spread = eval_acc, 0.0
    return {"epoch": epoch, "steps": step, "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "beta": beta, "eval_loss": eval_loss, "eval_acc": eval_acc, "moe_eval_acc": moe_acc,
            "expert_spread": spread, "step_seconds": float(np.median(times)) if times else 0.0}


def _diverged(model, last_good, cfg, step, epoch, out, reason) -> None:
    for name, t in model.named_parameters().items():
        t.data = last_good[name]
        t.grad = None
    msg = f"training diverged at step {step} (epoch {epoch}): {reason}"
    log.error(msg)
    if out is not None:
        path = out / "last_good.ewac"
        ckpt_io.save(path, ckpt_io.from_model(model, cfg.to_dict(), step, epoch, {"seed": cfg.seed},
                                              f"last good weights before divergence at step {step}"))
        msg += f"; last good weights saved to {path}"
    raise DivergenceError(msg)


def convert_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    """Dense checkpoint whose FFNs are the expert means; dense input is returned unchanged."""
    if not ckpt.is_moe:
        return Checkpoint(dict(ckpt.header), {n: a.copy() for n, a in ckpt.params.items()})
    model = ckpt_io.to_model(ckpt)
    blocks = model.moe_blocks
    dense = convert_model(model)
    note = (f"converted by expert-weight averaging: blocks {blocks}, "
            f"{model.moe_layers()[0].num_experts} experts each")
    prev = ckpt.header.get("provenance", "")
    header = dict(ckpt.header, provenance=f"{prev}; {note}" if prev else note)
    return ckpt_io.from_model(dense, header.get("config", {}), header.get("step", 0), header.get("epoch", 0),
                              header.get("rng_state"), header["provenance"])


def _quartiles(x) -> dict:
    q1, med, q3 = np.percentile(np.asarray(x), [25, 50, 75])
    return {"median": float(med), "iqr": float(q3 - q1)}


def bench_latency(cfg: TrainConfig, steps: int = 50, warmup: int = 3, batch_size: int | None = None) -> dict:
    """Interleaved per-step wall times of vanilla and EWA training on one fixed batch,
    plus inference of the vanilla and the converted EWA model."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    bs = batch_size or cfg.batch_size
    mc = cfg.model
    rng = np.random.default_rng(cfg.seed)
    images = rng.standard_normal((bs, mc.in_chans, mc.image_size, mc.image_size))
    targets = smoothed_targets(rng.integers(0, mc.n_classes, bs), mc.n_classes, cfg.label_smoothing)
    vanilla_cfg = dataclasses.replace(cfg, moe=dataclasses.replace(cfg.moe, placement="none"))
    ewa_cfg = cfg if cfg.uses_moe else dataclasses.replace(cfg, moe=dataclasses.replace(cfg.moe, placement="every-2"))
    runs = {}
    for name, c in (("vanilla", vanilla_cfg), ("vanilla_repeat", vanilla_cfg), ("ewa", ewa_cfg)):
        init_rng, step_rng, _ = _rng_streams(cfg.seed)
        runs[name] = (build_model(c, init_rng), step_rng, OptimizerState(), c)
    beta = cfg.ewa.share_rate
    lr = cfg.optimizer.lr * 0.1
    times = {name: [] for name in runs}
    for i in range(warmup + steps):
        names = list(runs) if i % 2 == 0 else list(reversed(runs))
        for name in names:
            model, srng, state, c = runs[name]
            t0 = time.perf_counter()
            train_step(model, images, targets, srng, state, lr, c, beta)
            if i >= warmup:
                times[name].append(time.perf_counter() - t0)

    infer = {"vanilla": runs["vanilla"][0], "converted": convert_model(runs["ewa"][0])}
    infer_times = {name: [] for name in infer}
    for i in range(warmup + steps):
        names = list(infer) if i % 2 == 0 else list(reversed(infer))
        for name in names:
            t0 = time.perf_counter()
            model_forward(infer[name], images, "eval")
            if i >= warmup:
                infer_times[name].append(time.perf_counter() - t0)

    report = {"steps": steps, "batch_size": bs, "moe_mode": ewa_cfg.moe.mode,
              "num_experts": ewa_cfg.moe.num_experts, "placement": ewa_cfg.moe.placement}
    for name, ts in times.items():
        report[f"train_{name}"] = _quartiles(ts)
    for name, ts in infer_times.items():
        report[f"infer_{name}"] = _quartiles(ts)
    base = report["train_vanilla"]["median"]
    report["train_ratio"] = report["train_ewa"]["median"] / base
    report["train_ratio_vanilla_vs_vanilla"] = report["train_vanilla_repeat"]["median"] / base
    report["infer_ratio"] = report["infer_converted"]["median"] / report["infer_vanilla"]["median"]
    report["infer_noise"] = max(report["infer_vanilla"]["iqr"], report["infer_converted"]["iqr"]) \
        / report["infer_vanilla"]["median"]
    report["same_inference_graph"] = (
        {n: t.shape for n, t in infer["vanilla"].named_parameters().items()}
        == {n: t.shape for n, t in infer["converted"].named_parameters().items()})
    report["raw"] = {"train": times, "infer": infer_times}
    return report
