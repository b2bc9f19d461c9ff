"""Cross-entropy training with Adam and an inverse-sqrt warmup schedule,
periodic evaluation, and bit-exact binary checkpointing.

Training is deterministic: the parameter trajectory is a pure function of
(seed, configs), batches are derived statelessly from (seed, step), and
resuming from a checkpoint reproduces an uninterrupted run bit-exactly.
"""

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

import posenet.tensor as T
from posenet import data
from posenet.model import ModelConfig, Parameters, bind, forward_train
from posenet.tensor import Graph


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    train_steps: int = 5000
    batch_size: int = 32
    eval_every: int = 2000
    eval_size: int = 64
    lr_scale: float = 1.0
    warmup_steps: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.0
    max_grad_norm: float = 0.0  # 0 disables clipping
    seed: int = 0
    checkpoint_dir: str = ""
    # optional early exit: stop at the first eval where every named metric
    # reaches its threshold, e.g. {"accuracy": 0.99}
    early_stop: dict = None

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy_loss(logits, targets, pad_mask, label_smoothing=0.0):
    """Mean over unpadded positions of -log p(target), differentiable.

    With smoothing s the target distribution puts 1-s on the target id and
    s/(V-1) on every other id.
    """
    targets = np.asarray(targets)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    count = int(pad_mask.sum())
    if count == 0:
        raise ValueError("cross_entropy_loss: all positions are padded")
    vocab = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"targets out of range [0, {vocab})")
    if label_smoothing:
        dist = np.full(logits.shape, label_smoothing / (vocab - 1))
        np.put_along_axis(dist, targets[..., None], 1.0 - label_smoothing, axis=-1)
    else:
        dist = np.zeros(logits.shape)
        np.put_along_axis(dist, targets[..., None], 1.0, axis=-1)
    weights = dist * pad_mask[..., None] / count
    logp = T.log_softmax(logits)
    return T.scale(T.sum_all(T.mul(logp, weights)), -1.0)


def neg_log_perplexity(logits, targets, pad_mask):
    """Mean log-probability of the targets (0 for perfect prediction,
    -ln V for uniform logits). Plain float, no gradient."""
    logits = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    targets = np.asarray(targets)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    count = int(pad_mask.sum())
    if count == 0:
        raise ValueError("neg_log_perplexity: all positions are padded")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return float(picked[pad_mask].sum() / count)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def lr_at(step, depth, warmup, scale):
    """scale * depth^-0.5 * min(step^-0.5, step * warmup^-1.5); peaks at
    step == warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * depth ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_for(cls, params):
        state = cls()
        for name, t in params.items():
            state.m[name] = np.zeros(t.shape)
            state.v[name] = np.zeros(t.shape)
        return state


def adam_step(params, grads, state, step, lr, beta1=0.9, beta2=0.98, eps=1e-9):
    """One bias-corrected Adam update, in place and deterministic."""
    if set(grads) != set(params.names()) or set(state.m) != set(params.names()):
        raise ValueError("adam_step: parameter/gradient/moment inventories differ")
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, t in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(grads, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"PNET"
_VERSION = 1


@dataclass
class Checkpoint:
    step: int
    model_config: ModelConfig
    params: Parameters
    adam: AdamState
    train_seed: int


def _write_u32(fh, value):
    fh.write(struct.pack("<I", value))


def _write_tensor(fh, name, arr):
    encoded = name.encode("utf-8")
    _write_u32(fh, len(encoded))
    fh.write(encoded)
    _write_u32(fh, arr.ndim)
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("corrupt checkpoint: truncated file")
    return buf


def _read_u32(fh):
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def _read_tensor(fh):
    name = _read_exact(fh, _read_u32(fh)).decode("utf-8")
    rank = _read_u32(fh)
    shape = tuple(
        struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)
    )
    n_bytes = 8 * int(np.prod(shape))
    arr = np.frombuffer(_read_exact(fh, n_bytes), dtype="<f8").reshape(shape)
    return name, arr.astype(np.float64)


def save_checkpoint(path, ckpt):
    header = {
        "step": ckpt.step,
        "train_seed": ckpt.train_seed,
        "model_config": dataclasses.asdict(ckpt.model_config),
    }
    blob = json.dumps(header).encode("utf-8")
    names = ckpt.params.names()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        _write_u32(fh, _VERSION)
        _write_u32(fh, len(blob))
        fh.write(blob)
        _write_u32(fh, 3 * len(names))
        for name, t in ckpt.params.items():
            _write_tensor(fh, name, t.data)
        for name in names:
            _write_tensor(fh, "adam.m." + name, ckpt.adam.m[name])
        for name in names:
            _write_tensor(fh, "adam.v." + name, ckpt.adam.v[name])


def load_checkpoint(path, expected_config=None):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise ValueError("corrupt checkpoint: bad magic bytes")
        version = _read_u32(fh)
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_exact(fh, _read_u32(fh)).decode("utf-8"))
        count = _read_u32(fh)
        tensors = dict(_read_tensor(fh) for _ in range(count))
    cfg = ModelConfig(**header["model_config"])
    if expected_config is not None:
        _compare_configs(expected_config, cfg)
    params = Parameters()
    adam = AdamState()
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = arr.copy()
        else:
            params.add(name, arr)
    return Checkpoint(
        step=header["step"],
        model_config=cfg,
        params=params,
        adam=adam,
        train_seed=header["train_seed"],
    )


def _compare_configs(expected, loaded):
    def normalize(value):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        return value

    def walk(e, g, path):
        for key in e:
            sub = f"{path}.{key}" if path else key
            if isinstance(e[key], dict):
                walk(e[key], g[key], sub)
            elif normalize(e[key]) != normalize(g[key]):
                raise ValueError(
                    f"checkpoint config mismatch at {sub}: "
                    f"expected {e[key]!r}, found {g[key]!r}"
                )

    walk(dataclasses.asdict(expected), dataclasses.asdict(loaded), "")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train_step(model_cfg, bound, params, task, tcfg, state, step):
    """One optimization step; returns the training loss value."""
    batch = data.train_batch(task, tcfg.batch_size, tcfg.seed, step)
    params.zero_grads()
    with Graph() as g:
        logits = forward_train(batch.src_ids, batch.tgt_ids, model_cfg, bound)
        loss = cross_entropy_loss(
            logits, batch.tgt_ids, batch.tgt_mask, tcfg.label_smoothing
        )
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        g.backward(loss)
    grads = {
        name: (t.grad if t.grad is not None else np.zeros(t.shape))
        for name, t in params.items()
    }
    if tcfg.max_grad_norm > 0:
        clip_gradients(grads, tcfg.max_grad_norm)
    lr = lr_at(step, model_cfg.depth, tcfg.warmup_steps, tcfg.lr_scale)
    adam_step(
        params, grads, state, step, lr,
        beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.adam_eps,
    )
    return loss_value


def train_loop(model_cfg, params, task, tcfg, start_step=0, adam_state=None,
               log_path=None, checkpoint_dir=None, progress=None):
    """Run steps start_step+1 .. train_steps; every eval_every steps run the
    held-out evaluation, append one metrics log line, and write a
    checkpoint. Returns (final Checkpoint, list of MetricsRecord)."""
    from posenet import metrics as metrics_mod

    if task.max_len + 1 > model_cfg.max_length:
        raise ValueError(
            f"task sequences up to {task.max_len}+EOS exceed model "
            f"max_length {model_cfg.max_length}"
        )
    bound = bind(model_cfg, params)
    state = adam_state if adam_state is not None else AdamState.zeros_for(params)
    held_out = data.eval_pairs(task, tcfg.eval_size, seed=tcfg.seed)
    checkpoint_dir = checkpoint_dir or tcfg.checkpoint_dir or None
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    records = []
    last_step = start_step
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(start_step + 1, tcfg.train_steps + 1):
            loss_value = train_step(model_cfg, bound, params, task, tcfg, state, step)
            last_step = step
            if progress is not None:
                progress(step, loss_value)
            if step % tcfg.eval_every == 0:
                record = metrics_mod.evaluate(
                    model_cfg, bound, held_out, step=step,
                    label_smoothing=tcfg.label_smoothing,
                )
                records.append(record)
                if log_fh:
                    log_fh.write(record.log_line() + "\n")
                    log_fh.flush()
                if checkpoint_dir:
                    ckpt = Checkpoint(step, model_cfg, params, state, tcfg.seed)
                    save_checkpoint(
                        os.path.join(checkpoint_dir, f"ckpt_{step}.pnet"), ckpt
                    )
                if tcfg.early_stop and all(
                    getattr(record, key) >= threshold
                    for key, threshold in tcfg.early_stop.items()
                ):
                    break
    finally:
        if log_fh:
            log_fh.close()
    final = Checkpoint(last_step, model_cfg, params, state, tcfg.seed)
    if checkpoint_dir:
        save_checkpoint(os.path.join(checkpoint_dir, "ckpt_final.pnet"), final)
    return final, records
