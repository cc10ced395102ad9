"""Optimization engine: AdamW, SAM, mixup, linear schedules, two-phase training.

Confidence and displacement models are trained separately (two-step protocol):
the confidence phase optimizes the cross-entropy loss and may use mixup, the
displacement phase optimizes the masked Huber loss and must not. Learning rate
and weight decay both follow the same linear decay, ending at 1/100th of their
initial values at the final epoch.

Checkpoints carry a sidecar manifest (plain ``key=value``) plus an optimizer
sidecar holding Adam moments and the sampling RNG state, so an interrupted run
can resume and reproduce the uninterrupted loss trace.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import ActionSet, ChunkSpec, FeatureSequence, sample_chunk
from .models import (
    ModelConfig,
    SpottingModel,
    config_to_manifest,
    load_checkpoint,
    load_state_into,
    read_manifest,
    save_checkpoint,
    state_arrays,
    write_manifest,
)
from .targets import (
    RadiusConfig,
    confidence_loss,
    displacement_loss,
    make_confidence_targets,
    make_displacement_targets,
)
from .util import atomic_write_text

DECAY_FLOOR = 0.01  # final epoch runs at 1/100th of the initial value

METRICS_FIELDS = ("epoch", "phase", "loss", "lr", "wd", "wall_seconds")


class TrainPhase(str, enum.Enum):
    CONFIDENCE = "confidence"
    DISPLACEMENT = "displacement"


class TrainingDivergedError(RuntimeError):
    """Raised on a non-finite loss or gradient; the last checkpoint survives."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class OptimConfig:
    lr0: float = 1e-3
    weight_decay0: float = 1e-3
    sam_rho: float = 0.05  # 0 disables SAM
    mixup_alpha: float = 0.2  # 0 disables mixup
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1000
    chunks_per_epoch: int = 8192
    batch_size: int = 256
    seed: int = 0
    checkpoint_every: int = 0  # 0: checkpoint only at the end

    def __post_init__(self):
        numeric = (
            self.lr0, self.weight_decay0, self.sam_rho, self.mixup_alpha,
            self.adam_beta1, self.adam_beta2, self.adam_eps,
        )
        if any(v < 0 for v in numeric):
            raise ValueError("optimizer settings must be nonnegative")
        if self.epochs < 0 or self.chunks_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0; chunks_per_epoch and batch_size >= 1")


def linear_decay(v0: float, epoch: int, total_epochs: int) -> float:
    """Linearly decay from ``v0`` (epoch 1) to ``v0/100`` (final epoch)."""
    if not 1 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {total_epochs}]")
    if total_epochs == 1:
        return v0
    return v0 * (1.0 - (1.0 - DECAY_FLOOR) * (epoch - 1) / (total_epochs - 1))


class AdamW(torch.optim.Optimizer):
    """Adam with bias correction, then decoupled multiplicative weight decay.

    Step order: moment updates, bias-corrected Adam move, then
    ``p <- p - lr*wd*p`` applied to the updated value, independent of the
    gradient term. All parameters decay uniformly (biases included).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr < 0 or eps < 0 or weight_decay < 0:
            raise ValueError("invalid AdamW hyper-parameters")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if not torch.isfinite(grad).all():
                    raise FloatingPointError("non-finite gradient in AdamW step")
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                m, v = state["m"], state["v"]
                m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
                v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
                m_hat = m / (1.0 - beta1 ** state["step"])
                v_hat = v / (1.0 - beta2 ** state["step"])
                p.addcdiv_(m_hat, v_hat.sqrt().add_(group["eps"]), value=-group["lr"])
                if group["weight_decay"]:
                    p.mul_(1.0 - group["lr"] * group["weight_decay"])
        return loss


def global_grad_norm(params) -> float:
    """L2 norm of all gradients concatenated into one vector."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def sam_step(loss_fn, optimizer, rho: float) -> float:
    """One optimizer step, optionally sharpness-aware.

    ``loss_fn()`` must recompute the loss at the current parameter values.
    With ``rho > 0`` the gradient fed to the inner optimizer is taken at the
    adversarial point ``params + rho * g / ||g||`` (one global L2 norm over
    all parameters); parameters are restored before stepping, so the
    perturbation never escapes. A zero gradient norm skips the perturbation.
    Returns the loss at the unperturbed parameters.
    """
    params = [p for group in optimizer.param_groups for p in group["params"]]
    optimizer.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {float(loss)}")
    loss.backward()
    if rho > 0:
        norm = global_grad_norm(params)
        if norm > 0:
            saved = [p.detach().clone() for p in params]
            with torch.no_grad():
                for p in params:
                    if p.grad is not None:
                        p.add_(p.grad, alpha=rho / norm)
            optimizer.zero_grad(set_to_none=True)
            perturbed_loss = loss_fn()
            if not torch.isfinite(perturbed_loss):
                with torch.no_grad():
                    for p, s in zip(params, saved):
                        p.copy_(s)
                raise FloatingPointError("non-finite loss at SAM perturbation")
            perturbed_loss.backward()
            with torch.no_grad():
                for p, s in zip(params, saved):
                    p.copy_(s)
    optimizer.step()
    return float(loss.detach())


def mixup_batch(x: torch.Tensor, conf_targets: torch.Tensor, alpha: float, rng):
    """Mix each batch element with a random partner, weights ~ Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValueError("mixup needs alpha > 0")
    if x.shape[0] < 2:
        raise ValueError("mixup needs batch size >= 2")
    perm = rng.permutation(x.shape[0])
    lam = torch.as_tensor(rng.beta(alpha, alpha, size=x.shape[0]), dtype=x.dtype)
    lam = lam.view(-1, *([1] * (x.dim() - 1)))
    mixed_x = lam * x + (1.0 - lam) * x[perm]
    mixed_c = lam * conf_targets + (1.0 - lam) * conf_targets[perm]
    return mixed_x, mixed_c


@dataclass
class TrainResult:
    model: SpottingModel
    metrics: list[dict]
    checkpoint_path: str | None


def config_hash(*configs) -> str:
    """Stable digest of everything that defines the run semantics.

    ``checkpoint_every`` is operational, not semantic, so it is excluded:
    resuming must work regardless of how often the original run snapshotted.
    """
    records = []
    for c in configs:
        record = asdict(c)
        record.pop("checkpoint_every", None)
        records.append(record)
    blob = json.dumps(records, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def write_metrics_csv(path, rows: list[dict]) -> None:
    lines = [",".join(METRICS_FIELDS)]
    for row in rows:
        lines.append(
            f"{row['epoch']},{row['phase']},{row['loss']:.9g},{row['lr']:.9g},"
            f"{row['wd']:.9g},{row['wall_seconds']:.3f}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def _assemble_batch(phase, videos, chunk_spec, radius_cfg, rng, batch_size):
    t_chunk, k = chunk_spec.num_anchors, chunk_spec.num_classes
    xs, first, second = [], [], []
    for _ in range(batch_size):
        seq, acts = videos[int(rng.integers(len(videos)))]
        chunk, local = sample_chunk(seq, acts, chunk_spec, rng)
        xs.append(chunk)
        if phase is TrainPhase.CONFIDENCE:
            first.append(make_confidence_targets(local, t_chunk, k, radius_cfg))
        else:
            disp, mask = make_displacement_targets(local, t_chunk, k, radius_cfg)
            first.append(disp)
            second.append(mask)
    x = torch.from_numpy(np.stack(xs))
    a = torch.from_numpy(np.stack(first))
    b = torch.from_numpy(np.stack(second)) if second else None
    return x, a, b


def _save_training_checkpoint(path, model, optimizer, rng, phase, epoch, cfg_hash, seed, extra):
    save_checkpoint(path, state_arrays(model))
    manifest = {
        "phase": phase.value,
        "epoch": str(epoch),
        "config_hash": cfg_hash,
        "seed": str(seed),
        "rng_state": json.dumps(rng.bit_generator.state),
    }
    manifest.update(config_to_manifest(model.config))
    manifest.update(extra or {})
    write_manifest(str(path) + ".manifest", manifest)
    moments: dict[str, np.ndarray] = {}
    step = 0
    named = dict(model.named_parameters())
    for name, p in named.items():
        state = optimizer.state.get(p)
        if state:
            moments[f"m.{name}"] = state["m"].detach().cpu().numpy()
            moments[f"v.{name}"] = state["v"].detach().cpu().numpy()
            step = state["step"]
    moments["step"] = np.array(float(step), dtype=np.float32)
    save_checkpoint(str(path) + ".optim", moments)


def _load_training_checkpoint(path, model, optimizer, rng, phase, cfg_hash):
    manifest = read_manifest(str(path) + ".manifest")
    if manifest["phase"] != phase.value:
        raise ValueError(f"resume checkpoint is phase {manifest['phase']!r}, not {phase.value!r}")
    if manifest["config_hash"] != cfg_hash:
        raise ValueError("resume checkpoint was produced with a different configuration")
    load_state_into(model, load_checkpoint(path))
    moments = load_checkpoint(str(path) + ".optim")
    step = int(moments.pop("step"))
    for name, p in model.named_parameters():
        if f"m.{name}" in moments:  # params the phase never stepped have no state
            optimizer.state[p] = {
                "step": step,
                "m": torch.from_numpy(moments[f"m.{name}"].copy()),
                "v": torch.from_numpy(moments[f"v.{name}"].copy()),
            }
    state = json.loads(manifest["rng_state"])
    rng.bit_generator.state = state
    return int(manifest["epoch"])


def _validate_train_inputs(videos, chunk_spec, radius_cfg, model_cfg):
    if not videos:
        raise ValueError("no training videos")
    for seq, acts in videos:
        if seq.feature_rate_hz != chunk_spec.feature_rate_hz:
            raise ValueError(f"{seq.video_id!r}: feature rate {seq.feature_rate_hz} != chunk rate")
        if seq.feature_dim != model_cfg.feature_dim:
            raise ValueError(f"{seq.video_id!r}: feature dim {seq.feature_dim} != model {model_cfg.feature_dim}")
        for t, k in acts:
            if t >= seq.num_anchors or k >= chunk_spec.num_classes:
                raise ValueError(f"{seq.video_id!r}: action ({t}, {k}) out of range")
    if radius_cfg.feature_rate_hz != chunk_spec.feature_rate_hz:
        raise ValueError("radius feature rate != chunk feature rate")
    if model_cfg.num_anchors != chunk_spec.num_anchors:
        raise ValueError(f"model anchors {model_cfg.num_anchors} != chunk anchors {chunk_spec.num_anchors}")
    if model_cfg.num_classes != chunk_spec.num_classes:
        raise ValueError("model and chunk class counts differ")


def train(
    phase,
    videos: list[tuple[FeatureSequence, ActionSet]],
    chunk_spec: ChunkSpec,
    radius_cfg: RadiusConfig,
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    *,
    out_dir=None,
    checkpoint_name=None,
    metrics_name=None,
    deterministic=False,
    resume=None,
    manifest_extra=None,
    log=None,
) -> TrainResult:
    """Train one phase end to end; returns the model, metrics and checkpoint.

    With ``out_dir`` set, writes ``<phase>.ckpt`` (+ ``.manifest``/``.optim``
    sidecars) and ``metrics_<phase>.csv``. ``deterministic`` forces a single
    torch thread and zeroes the wall-clock column so identical seeds give
    byte-identical outputs. ``resume`` points at an earlier checkpoint of the
    same phase and configuration.
    """
    phase = TrainPhase(phase)
    if phase is TrainPhase.DISPLACEMENT and optim_cfg.mixup_alpha > 0:
        raise ValueError("mixup is not applicable to displacement training (set mixup_alpha=0)")
    _validate_train_inputs(videos, chunk_spec, radius_cfg, model_cfg)
    if deterministic:
        torch.set_num_threads(1)

    cfg_hash = config_hash(chunk_spec, radius_cfg, model_cfg, optim_cfg)
    model = SpottingModel.build(model_cfg, optim_cfg.seed)
    optimizer = AdamW(
        model.parameters(),
        lr=optim_cfg.lr0,
        betas=(optim_cfg.adam_beta1, optim_cfg.adam_beta2),
        eps=optim_cfg.adam_eps,
        weight_decay=optim_cfg.weight_decay0,
    )
    rng = np.random.default_rng(optim_cfg.seed)

    start_epoch = 1
    if resume is not None:
        start_epoch = _load_training_checkpoint(resume, model, optimizer, rng, phase, cfg_hash) + 1

    ckpt_path = None
    last_saved = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_base = os.path.join(out_dir, checkpoint_name or phase.value)
        ckpt_path = ckpt_base + ".ckpt"
        metrics_path = os.path.join(out_dir, metrics_name or f"metrics_{phase.value}.csv")

    def save(epoch, intermediate=False):
        nonlocal last_saved
        if ckpt_path is None:
            return
        path = f"{ckpt_base}_epoch{epoch:04d}.ckpt" if intermediate else ckpt_path
        _save_training_checkpoint(
            path, model, optimizer, rng, phase, epoch, cfg_hash,
            optim_cfg.seed, manifest_extra,
        )
        last_saved = path

    steps_per_epoch = max(1, optim_cfg.chunks_per_epoch // optim_cfg.batch_size)
    metrics: list[dict] = []
    if start_epoch == 1:
        save(0)  # initial parameters; also the epochs=0 result
    try:
        for epoch in range(start_epoch, optim_cfg.epochs + 1):
            t0 = time.monotonic()
            lr = linear_decay(optim_cfg.lr0, epoch, optim_cfg.epochs)
            wd = linear_decay(optim_cfg.weight_decay0, epoch, optim_cfg.epochs)
            for group in optimizer.param_groups:
                group["lr"] = lr
                group["weight_decay"] = wd
            epoch_loss = 0.0
            for _ in range(steps_per_epoch):
                x, a, b = _assemble_batch(
                    phase, videos, chunk_spec, radius_cfg, rng, optim_cfg.batch_size
                )
                if phase is TrainPhase.CONFIDENCE:
                    if optim_cfg.mixup_alpha > 0 and x.shape[0] >= 2:
                        x, a = mixup_batch(x, a, optim_cfg.mixup_alpha, rng)
                    def loss_fn(x=x, a=a):
                        return confidence_loss(model(x).conf_logits, a) / x.shape[0]
                else:
                    def loss_fn(x=x, a=a, b=b):
                        return displacement_loss(model(x).disp, a, b) / x.shape[0]
                try:
                    epoch_loss += sam_step(loss_fn, optimizer, optim_cfg.sam_rho)
                except (FloatingPointError, ValueError) as e:
                    raise TrainingDivergedError(
                        f"epoch {epoch}: {e}", last_checkpoint=last_saved
                    ) from e
            row = {
                "epoch": epoch,
                "phase": phase.value,
                "loss": epoch_loss / steps_per_epoch,
                "lr": lr,
                "wd": wd,
                "wall_seconds": 0.0 if deterministic else time.monotonic() - t0,
            }
            metrics.append(row)
            if log is not None:
                log(f"epoch {epoch}/{optim_cfg.epochs} [{phase.value}] loss={row['loss']:.6f}")
            if optim_cfg.checkpoint_every and epoch % optim_cfg.checkpoint_every == 0:
                save(epoch, intermediate=True)
        if optim_cfg.epochs >= start_epoch:
            save(optim_cfg.epochs)
    finally:
        if out_dir is not None and metrics:
            write_metrics_csv(metrics_path, metrics)
    return TrainResult(model=model, metrics=metrics, checkpoint_path=ckpt_path)
