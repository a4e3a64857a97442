"""Training loop on synthetic sequences.

Each sequence is unrolled frame by frame: frame 0 uses its ground-truth mask as
reference; later references use the ground truth during the teacher-forcing
warm-up and the model's own (detached) prediction afterwards. Reference tokens
go into the per-layer memory at frame 0 and every ``store_interval`` frames.
"""

from __future__ import annotations

import csv
import logging
import math
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Adam, NumericalError, Tensor, clip_grad_norm, ops, precision
from ..config import RunConfig
from ..decoder import aggregate_objects
from ..dts import RatioTracker, sample_gumbel
from ..synth import gen_sequence, with_frames
from .losses import bootstrapped_ce, soft_jaccard
from .model import MemoryRead, VOSModel

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Batch:
    frames: np.ndarray  # (B, T, H, W, 3)
    labels: np.ndarray  # (B, T, H, W)
    noise: np.ndarray  # (B, T, L, N, 2) Gumbel draws
    seeds: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def split(self, parts: int) -> list:
        idx = np.array_split(np.arange(len(self)), parts)
        return [Batch(self.frames[i], self.labels[i], self.noise[i], [self.seeds[j] for j in i]) for i in idx]


def make_batch(cfg: RunConfig, step: int, size: int | None = None, seed: int | None = None) -> Batch:
    """Deterministic batch for a step; each sample owns its data and Gumbel noise."""
    size = size or cfg.train.batch * cfg.train.grad_accum
    base = cfg.train.seed if seed is None else seed
    synth = with_frames(cfg.synth, cfg.train.seq_len)
    frames, labels, noise, seeds = [], [], [], []
    for b in range(size):
        ss = np.random.SeedSequence([base, step, b])
        s = int(ss.generate_state(1)[0])
        f, r = gen_sequence(synth, s)
        rng = np.random.default_rng(ss.spawn(1)[0])
        noise.append(sample_gumbel((cfg.train.seq_len, cfg.model.L, cfg.model.N, 2), rng))
        frames.append(f)
        labels.append(r)
        seeds.append(s)
    return Batch(np.stack(frames), np.stack(labels), np.stack(noise), seeds)


@dataclass
class Schedule:
    cfg: RunConfig

    def frac(self, step: int) -> float:
        return step / max(self.cfg.train.steps, 1)

    def lr(self, step: int) -> float:
        tc = self.cfg.train
        if step < tc.warmup_steps:
            return tc.lr * (step + 1) / tc.warmup_steps
        span = max(tc.steps - tc.warmup_steps, 1)
        q = min(max((step - tc.warmup_steps) / span, 0.0), 1.0)
        return tc.lr_main + 0.5 * (tc.lr - tc.lr_main) * (1 + math.cos(math.pi * q))

    def tau(self, step: int) -> float:
        tc = self.cfg.train
        return tc.tau_start + (tc.tau_end - tc.tau_start) * min(self.frac(step), 1.0)

    def keep_frac(self, step: int) -> float:
        tc = self.cfg.train
        q = min(self.frac(step) / max(tc.bootstrap_anneal_frac, 1e-12), 1.0)
        return 1.0 + (tc.bootstrap_final - 1.0) * q

    def teacher_forcing(self, step: int) -> bool:
        return self.frac(step) < self.cfg.train.teacher_forcing_frac


def sequence_loss(model: VOSModel, cfg: RunConfig, batch: Batch, *, keep_frac: float, tau: float,
                  teacher: bool, select: str = "gumbel"):
    """Unrolled loss of a batch of sequences. Returns ``(loss Tensor, parts dict)``."""
    tc = cfg.train
    B, T = batch.labels.shape[:2]
    L = cfg.model.L
    valid = batch.labels[:, 0].reshape(B, -1).max(axis=1)
    feats = [model.embed.frame_features(batch.frames[:, t]) for t in range(T)]
    memory = [None] * L
    ref_labels = batch.labels[:, 0]
    total = ce_sum = jac_sum = None
    kept = np.zeros(L)
    seen = 0
    keep_means = []
    use_sel = select if cfg.model.dts else "none"
    # a one-frame sequence is matched against itself with its ground truth as reference
    for t in range(1, T) if T > 1 else [0]:
        out = model.forward(
            feats[max(t - 1, 0)][0], ref_labels, feats[t][0], feats[t][1], valid, memory=memory,
            select=use_sel, tau=tau, noise=batch.noise[:, t].transpose(1, 0, 2, 3), with_stats=False,
        )
        ce = bootstrapped_ce(out.logits, batch.labels[:, t], keep_frac)
        jac = soft_jaccard(out.logits, batch.labels[:, t])
        step_loss = ops.add(ops.scale(ce, tc.loss_ce_weight), ops.scale(jac, tc.loss_jaccard_weight))
        total = step_loss if total is None else ops.add(total, step_loss)
        ce_sum = ce.item() + (ce_sum or 0.0)
        jac_sum = jac.item() + (jac_sum or 0.0)
        if cfg.model.dts:
            for l in range(L):
                kept[l] += float(out.hard[l].mean())
                if out.keep[l] is not None:
                    keep_means.append(ops.mean(out.keep[l]))
            seen += 1
        ref_frame = t - 1
        if ref_frame == 0 or (ref_frame > 0 and ref_frame % tc.store_interval == 0):
            memory = _append_memory(memory, out, B)
        if t < T - 1:
            ref_labels = batch.labels[:, t] if teacher else aggregate_objects(out.logits)
    if cfg.model.dts and tc.ratio_reg_weight > 0 and keep_means:
        reg = None
        for km in keep_means:
            term = ops.square(ops.sub(km, tc.ratio_reg_target))
            reg = term if reg is None else ops.add(reg, term)
        total = ops.add(total, ops.scale(reg, tc.ratio_reg_weight / len(keep_means)))
    ratios = kept / seen if seen else np.ones(L)
    return total, {"loss_ce": ce_sum, "loss_jaccard": jac_sum, "ratios": ratios}


def _append_memory(memory, out, B):
    new = []
    for l, lo in enumerate(out.layers):
        w = out.keep[l]
        if w is None:
            w = Tensor(np.ones(lo.K_ref.shape[:2], dtype=lo.K_ref.dtype))
        cur = memory[l]
        if cur is None:
            new.append(MemoryRead(lo.K_ref, lo.V_ref, w))
        else:
            new.append(MemoryRead(
                ops.concat([cur.keys, lo.K_ref], axis=1),
                ops.concat([cur.values, lo.V_ref], axis=1),
                ops.concat([cur.weight, w], axis=1),
            ))
    return new


def accumulate_gradients(model: VOSModel, cfg: RunConfig, batch: Batch, step: int, parts: int):
    """Backward over ``parts`` micro-batches; gradients sum to those of the full-batch mean loss."""
    sched = Schedule(cfg)
    kw = dict(keep_frac=sched.keep_frac(step), tau=sched.tau(step), teacher=sched.teacher_forcing(step))
    metrics = {"loss": 0.0, "loss_ce": 0.0, "loss_jaccard": 0.0, "ratios": np.zeros(cfg.model.L)}
    for mb in batch.split(parts):
        w = len(mb) / len(batch)
        try:
            loss, info = sequence_loss(model, cfg, mb, **kw)
        except NumericalError as exc:
            raise TrainingDiverged(f"non-finite activations at step {step}: {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at step {step} (ce={info['loss_ce']}, jaccard={info['loss_jaccard']})"
            )
        ops.scale(loss, w).backward()
        metrics["loss"] += w * value
        metrics["loss_ce"] += w * info["loss_ce"]
        metrics["loss_jaccard"] += w * info["loss_jaccard"]
        metrics["ratios"] = metrics["ratios"] + w * info["ratios"]
    return metrics


class BatchProducer:
    """Generates batches on a background thread into a bounded queue."""

    def __init__(self, cfg: RunConfig, start: int, stop: int, depth: int = 4):
        self.q: queue.Queue = queue.Queue(maxsize=max(depth, 1))
        self.cfg = cfg
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._run, args=(start, stop), daemon=True)
        self.thread.start()

    def _run(self, start, stop):
        for step in range(start, stop):
            if self._stop.is_set():
                return
            item = make_batch(self.cfg, step)
            while not self._stop.is_set():
                try:
                    self.q.put((step, item), timeout=0.1)
                    break
                except queue.Full:
                    continue

    def get(self):
        return self.q.get()

    def close(self):
        self._stop.set()


class Trainer:
    def __init__(self, cfg: RunConfig, model: VOSModel | None = None):
        self.cfg = cfg
        with precision(cfg.train.precision):
            self.model = model or VOSModel(cfg.model, seed=cfg.train.seed)
        self.model.cast(np.dtype(cfg.train.precision))
        self.opt = Adam(self.model.parameters(), lr=cfg.train.lr)
        self.schedule = Schedule(cfg)
        self.tracker = RatioTracker(cfg.model.L, window=max(1, cfg.train.steps // 10))
        self.step = 0
        self.log_rows: list = []

    def train_step(self, batch: Batch) -> dict:
        tc = self.cfg.train
        self.opt.zero_grad()
        metrics = accumulate_gradients(self.model, self.cfg, batch, self.step, tc.grad_accum)
        gnorm = clip_grad_norm(self.opt.params, tc.grad_clip)
        self.opt.lr = self.schedule.lr(self.step)
        self.opt.step()
        if self.cfg.model.dts:
            self.tracker.update(metrics["ratios"])
        metrics.update(step=self.step, lr=self.opt.lr, tau=self.schedule.tau(self.step), grad_norm=gnorm)
        self.step += 1
        return metrics

    def fit(self, steps: int | None = None, metrics_path=None, progress=None) -> list:
        tc = self.cfg.train
        stop = steps if steps is not None else tc.steps
        producer = BatchProducer(self.cfg, self.step, stop, tc.prefetch)
        writer = fh = None
        if metrics_path is not None:
            fh = open(metrics_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "loss_ce", "loss_jaccard", "lr", "tau"]
                            + [f"r_{l}" for l in range(self.cfg.model.L)])
        try:
            with precision(tc.precision):
                while self.step < stop:
                    step, batch = producer.get()
                    assert step == self.step
                    m = self.train_step(batch)
                    row = [m["step"], m["loss"], m["loss_ce"], m["loss_jaccard"], m["lr"], m["tau"]] + list(m["ratios"])
                    self.log_rows.append(row)
                    if writer is not None:
                        writer.writerow([_fmt(v) for v in row])
                    if step % tc.log_every == 0:
                        log.info("step %d loss %.4f ce %.4f jac %.4f r=%s", step, m["loss"], m["loss_ce"],
                                 m["loss_jaccard"], np.round(m["ratios"], 3).tolist())
                        if progress is not None:
                            progress(m)
        finally:
            producer.close()
            if fh is not None:
                fh.close()
        return self.log_rows

    def ratios(self) -> np.ndarray:
        if not self.cfg.model.dts:
            return np.ones(self.cfg.model.L)
        return self.tracker.stabilized()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
