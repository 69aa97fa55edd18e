"""Shortcut distillation by feature reconstruction.

The dense pipeline is the teacher. For each sampled frame the student
encodes with every window outside the (dilated) ground-truth mask sent
through the shortcut, then runs dense memory attention against the
teacher's memory bank. The loss is the mean squared difference of the
memory-conditioned features. Gradients w.r.t. the shortcut parameters are
derived by hand (back through the memory layers, the global encoder block
and the shortcut) and verified against central finite differences.

Only :class:`~sparsevos.swr.ShortcutWeights` are updated; every other
tensor is read-only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .corpus import Scene
from .encoder import EncoderConfig, encode_front, shortcut_prefix
from .layers import block, block_backward
from .memory import MemoryConfig, TokenSet, memory_layer_backward, run_memory_attention
from .pipeline import init_stream, step
from .swr import RouterConfig, RoutingDecision, ShortcutWeights, shortcut_backward, shortcut_forward, windows_from_masks
from .windows import WindowLayout, window_partition, window_unpartition


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    memory_strides: tuple[int, ...] = (1, 3, 5)
    sample_stride: int = 3
    update_stride: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.epochs < 1:
            raise ValueError("need lr > 0 and epochs >= 1")
        if self.sample_stride < 1 or self.update_stride < 1 or not self.memory_strides:
            raise ValueError("strides must be >= 1 and the memory stride schedule non-empty")

    def memory_stride(self, epoch: int) -> int:
        return self.memory_strides[min(epoch, len(self.memory_strides) - 1)]


@dataclass
class TrainRecord:
    steps: list[tuple[int, int, float]] = field(default_factory=list)  # (update, epoch, mean loss)
    initial_loss: float = math.nan
    final_loss: float = math.nan

    @property
    def reduction(self) -> float:
        return 1.0 - self.final_loss / self.initial_loss

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "epoch", "loss"])
            for s, e, loss in self.steps:
                wr.writerow([s, e, f"{loss:.9g}"])


def reconstruction_loss(student: np.ndarray, teacher: np.ndarray) -> float:
    if student.shape != teacher.shape:
        raise ValueError(f"feature shapes differ: {student.shape} vs {teacher.shape}")
    diff = np.asarray(student, dtype=np.float64) - np.asarray(teacher, dtype=np.float64)
    return float(np.mean(diff * diff))


@dataclass
class Sample:
    """Everything the student needs for one frame, captured from the teacher."""

    x: np.ndarray  # stage-2 input (h2, w2, d)
    memory: TokenSet
    target: np.ndarray  # teacher F_M (N, d)
    background: list[int]


def background_windows(gt_mask: np.ndarray, layout: WindowLayout, router: RouterConfig) -> list[int]:
    obj = windows_from_masks(gt_mask, layout, router)
    return [i for i in range(layout.n_windows) if i not in obj]


def collect_samples(scenes: Iterable[Scene], cfg: PipelineConfig, w: Mapping[str, np.ndarray], sample_stride: int, memory_stride: int) -> list[list[Sample]]:
    """Run the dense teacher over each scene and capture every
    ``sample_stride``-th frame (frame 0 has no memory and is skipped)."""
    mem = replace(cfg.model.memory, dt=memory_stride)
    tcfg = replace(cfg.dense(), model=replace(cfg.model, memory=mem))
    enc = cfg.model.encoder
    layout = enc.layout(2)
    out = []
    for sc in scenes:
        state = init_stream(sc.frames[0], sc.masks[0], tcfg, w, keep_trace=False)
        samples = []
        for t in range(1, len(sc.frames)):
            if t % sample_stride == 0:
                _, _, x = encode_front(sc.frames[t], enc, w)
                memory = TokenSet.from_frames(state.bank.frames())
                bg = background_windows(sc.masks[t], layout, cfg.router)
            step(state, sc.frames[t])
            if t % sample_stride == 0:
                samples.append(Sample(x, memory, state.trace[-1].f_m.copy(), bg))
        out.append(samples)
    return out


class Student:
    """Forward and backward of the shortcut-routed final stage plus memory
    attention, for a fixed teacher weight set."""

    def __init__(self, w: Mapping[str, np.ndarray], enc: EncoderConfig, mem: MemoryConfig, dtype=np.float32) -> None:
        routable = enc.routable_blocks()
        if len(routable) != 1 or enc.layers[2] != 2:
            raise TrainingError("distillation expects one routable and one global final-stage block")
        self.block = routable[0]
        self.enc, self.mem = enc, mem
        self.dtype = dtype
        names = [n for n in w if n.startswith(("enc.stage2.", "mem.layer"))]
        self.w = {n: w[n].astype(dtype) for n in names}
        self.layout = enc.layout(2)

    def forward(self, s: Sample, sc: ShortcutWeights, cache: dict | None = None) -> np.ndarray:
        enc, lay = self.enc, self.layout
        dt = self.dtype
        x = s.x.astype(dt)
        H, W, C = x.shape
        g = window_partition(x, lay.h, lay.w)
        tokens = g.blocks.reshape(g.n_windows, lay.h * lay.w, C)
        bg = np.asarray(s.background, dtype=np.int64)
        obj = np.setdiff1d(np.arange(g.n_windows), bg)
        out = np.empty_like(tokens)
        if obj.size:
            out[obj] = block(tokens[obj], self.w, f"enc.stage2.block{self.block}", enc.heads)
        sc_cache = {} if cache is not None else None
        if bg.size:
            out[bg] = shortcut_forward(tokens[bg], sc, sc_cache)
        y = window_unpartition(type(g)(g.layout, out.reshape(g.blocks.shape)), H, W)
        gl_cache = {} if cache is not None else None
        f_t = block(y.reshape(1, H * W, C), self.w, f"enc.stage2.block{enc.layers[2] - 1}", enc.heads, gl_cache)[0]
        mem = TokenSet(s.memory.tokens.astype(dt), s.memory.frame, s.memory.index)
        caches = [] if cache is not None else None
        f_m, _ = run_memory_attention(f_t, [mem] * self.mem.layers, self.w, self.mem.heads, caches)
        if cache is not None:
            cache.update(sc=sc_cache, gl=gl_cache, mem=caches, bg=bg, shape=(H, W, C), grid=g)
        return f_m

    def loss_and_grad(self, s: Sample, sc: ShortcutWeights) -> tuple[float, ShortcutWeights]:
        cache: dict = {}
        f_m = self.forward(s, sc, cache)
        target = s.target.astype(self.dtype)
        loss = reconstruction_loss(f_m, target)
        dy = (2.0 / f_m.size) * (f_m - target)
        for l in reversed(range(self.mem.layers)):
            dy = memory_layer_backward(dy, self.w, f"mem.layer{l}", cache["mem"][l])
        H, W, C = cache["shape"]
        dy = block_backward(dy[None], self.w, f"enc.stage2.block{self.enc.layers[2] - 1}", cache["gl"])[0]
        bg = cache["bg"]
        if not bg.size:
            return loss, _zeros_like(sc)
        lay = self.layout
        dgrid = window_partition(dy.reshape(H, W, C), lay.h, lay.w).blocks.reshape(-1, lay.h * lay.w, C)
        grads, _ = shortcut_backward(dgrid[bg], sc, cache["sc"])
        return loss, grads


def _zeros_like(sc: ShortcutWeights) -> ShortcutWeights:
    return ShortcutWeights(*(np.zeros_like(a) for a in _params(sc)))


def _params(sc: ShortcutWeights) -> tuple[np.ndarray, ...]:
    return sc.w_down, sc.w_up, sc.gamma, sc.beta


PARAM_NAMES = ("w_down", "w_up", "gamma", "beta")


class Adam:
    def __init__(self, cfg: TrainConfig, like: ShortcutWeights) -> None:
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros(a.shape, dtype=np.float64) for a in _params(like)]
        self.v = [np.zeros(a.shape, dtype=np.float64) for a in _params(like)]

    def update(self, sc: ShortcutWeights, grads: ShortcutWeights) -> ShortcutWeights:
        c = self.cfg
        self.t += 1
        new = []
        for i, (p, g) in enumerate(zip(_params(sc), _params(grads))):
            g = np.asarray(g, dtype=np.float64)
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            mhat = self.m[i] / (1 - c.beta1**self.t)
            vhat = self.v[i] / (1 - c.beta2**self.t)
            new.append((p - c.lr * mhat / (np.sqrt(vhat) + c.eps)).astype(p.dtype))
        return ShortcutWeights(*new)


def mean_loss(student: Student, streams: Sequence[Sequence[Sample]], sc: ShortcutWeights) -> float:
    losses = [reconstruction_loss(student.forward(s, sc), s.target) for samples in streams for s in samples]
    if not losses:
        raise TrainingError("no samples to evaluate")
    return float(np.mean(losses))


def train_shortcut(
    train: Sequence[Scene],
    heldout: Sequence[Scene],
    w: Mapping[str, np.ndarray],
    cfg: PipelineConfig,
    tcfg: TrainConfig = TrainConfig(),
    init: ShortcutWeights | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[ShortcutWeights, TrainRecord]:
    """Adam on the reconstruction loss with per-epoch memory strides.

    Frames are visited in stream order; every ``sample_stride``-th frame
    contributes a gradient and an update is applied every ``update_stride``
    visited frames (and at the end of each epoch) with the mean of the
    gradients gathered since the last update.
    """
    enc = cfg.model.encoder
    student = Student(w, enc, cfg.model.memory)
    sc = init.copy() if init is not None else ShortcutWeights.from_dict(w, shortcut_prefix(student.block)).copy()
    held = collect_samples(heldout, cfg, w, tcfg.sample_stride, 1)
    record = TrainRecord(initial_loss=mean_loss(student, held, sc))
    if log:
        log(f"initial held-out loss {record.initial_loss:.6g}")
    opt = Adam(tcfg, sc)
    update = 0
    for epoch in range(tcfg.epochs):
        stride = tcfg.memory_stride(epoch)
        streams = collect_samples(train, cfg, w, tcfg.sample_stride, stride)
        acc: list[ShortcutWeights] = []
        losses: list[float] = []
        frames = 0

        def flush() -> None:
            nonlocal sc, update, acc, losses
            if not acc:
                return
            mean = ShortcutWeights(*(np.mean([_params(g)[i] for g in acc], axis=0) for i in range(4)))
            sc = opt.update(sc, mean)
            update += 1
            record.steps.append((update, epoch, float(np.mean(losses))))
            acc, losses = [], []

        for scene, samples in zip(train, streams):
            it = iter(samples)
            for t in range(1, len(scene.frames)):
                frames += 1
                if t % tcfg.sample_stride == 0:
                    loss, g = student.loss_and_grad(next(it), sc)
                    if not math.isfinite(loss):
                        raise TrainingError(f"non-finite loss at epoch {epoch}, scene {scene.name}, frame {t}")
                    acc.append(g)
                    losses.append(loss)
                if frames % tcfg.update_stride == 0:
                    flush()
        flush()
        if log:
            log(f"epoch {epoch} memory stride {stride}: {update} updates, last loss {record.steps[-1][2] if record.steps else math.nan:.6g}")
    record.final_loss = mean_loss(student, held, sc)
    if log:
        log(f"final held-out loss {record.final_loss:.6g}")
    return sc, record


def finite_difference_check(
    student: Student, sample: Sample, sc: ShortcutWeights, h: float = 1e-3, per_tensor: int | None = None, seed: int = 0
) -> tuple[dict[str, float], int]:
    """Relative error between analytic and central-difference gradients,
    per parameter tensor. ``per_tensor`` limits the checked coordinates.

    A coordinate whose +-h perturbation flips any shortcut ReLU is skipped:
    the loss is not differentiable across the kink, so the difference
    quotient there is not a gradient oracle. Returns the errors and the
    number of skipped coordinates.
    """
    _, grads = student.loss_and_grad(sample, sc)
    rng = np.random.default_rng(seed)
    errors = {}
    skipped = 0

    def evaluate(params: list[np.ndarray]) -> tuple[float, np.ndarray]:
        cache: dict = {}
        f_m = student.forward(sample, ShortcutWeights(*params), cache)
        active = cache["sc"]["h"] > 0 if cache["sc"] else np.zeros(0, dtype=bool)
        return reconstruction_loss(f_m, sample.target), active

    _, base_active = evaluate(list(_params(sc)))
    for i, name in enumerate(PARAM_NAMES):
        p = _params(sc)[i]
        flat = np.arange(p.size)
        if per_tensor is not None and per_tensor < p.size:
            flat = np.sort(rng.choice(p.size, per_tensor, replace=False))
        fd, an = [], []
        g = np.asarray(_params(grads)[i], dtype=np.float64).ravel()
        for idx in flat:
            vals = []
            smooth = True
            for sign in (1.0, -1.0):
                params = [a.copy() for a in _params(sc)]
                params[i].flat[idx] += sign * h
                loss, active = evaluate(params)
                smooth &= bool(np.array_equal(active, base_active))
                vals.append(loss)
            if not smooth:
                skipped += 1
                continue
            fd.append((vals[0] - vals[1]) / (2 * h))
            an.append(g[idx])
        fd_a, an_a = np.asarray(fd), np.asarray(an)
        scale = max(np.linalg.norm(fd_a), np.linalg.norm(an_a), 1e-30)
        errors[name] = float(np.linalg.norm(an_a - fd_a) / scale)
    return errors, skipped


def to_float64(sample: Sample) -> Sample:
    m = sample.memory
    return Sample(
        sample.x.astype(np.float64),
        TokenSet(m.tokens.astype(np.float64), m.frame, m.index),
        sample.target.astype(np.float64),
        list(sample.background),
    )


def shortcut_as_float64(sc: ShortcutWeights) -> ShortcutWeights:
    return ShortcutWeights(*(a.astype(np.float64) for a in _params(sc)))


def forced_plan(t: int, n_windows: int, background: Sequence[int]) -> RoutingDecision:
    bg = set(background)
    return RoutingDecision(t, n_windows, w_pred=frozenset(i for i in range(n_windows) if i not in bg))
