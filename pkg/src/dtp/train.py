"""Training driver for both the full pipeline and the capacity-matched baseline.

The baseline feeds the raw image to the reflectance branch and its channel
mean to the illumination branch of an identical parser, so any metric gap
against the full model isolates what disentanglement itself buys.
"""
from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import AdamW, Tape, Tensor
from .checkpoint import save_checkpoint
from .config import RunConfig
from .dataset import AugmentationPolicy, CorpusSample, augment, load_corpus
from .disentangler import DisentangleNet
from .errors import ConfigError, ContractError, DataError, StateError
from .iaparser import IAParserNet, forward, iaparser_loss, parse
from .sod import (
    DisturbSchedule,
    GuidanceNoiseConfig,
    SodLossTerms,
    SodWeights,
    sod_train_step,
)

LOSS_CSV_HEADER = "step,l_dis,l_ret,l_smooth,l_sede,total"


def build_nets(cfg: RunConfig) -> tuple[DisentangleNet, IAParserNet]:
    dis = DisentangleNet(cfg.preset, seed=cfg.seed)
    seg = IAParserNet(cfg.k_classes, cfg.feat_channels, seed=cfg.seed + 1)
    return dis, seg


def make_forward_fn(dis_net, seg_net, baseline: bool):
    """(B,3,H,W) float array -> (B,K,H,W) logits array, eval mode."""

    def fn(batch: np.ndarray) -> np.ndarray:
        with dc.no_grad():
            x = Tensor(batch)
            if baseline:
                out = parse(seg_net, x, dc.mean_channels(x))
            else:
                out = forward(dis_net, seg_net, x)
            return out.logits.data

    return fn


def baseline_train_step(seg_net, optimizer, images, labels, lambda_ill,
                        ignore_index, tape: Tape) -> SodLossTerms:
    x = Tensor(images)
    tape.reset()
    with dc.use_tape(tape):
        out = parse(seg_net, x, dc.mean_channels(x))
        loss = iaparser_loss(out, labels, lambda_ill, ignore_index)
        total = loss.item()
        if not np.isfinite(total):
            raise ContractError("non-finite baseline loss")
        dc.backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    return SodLossTerms(0.0, 0.0, 0.0, total, total)


class _BatchStream:
    """Deterministic epoch-shuffled batches with per-step augmentation."""

    def __init__(self, samples: list[CorpusSample], cfg: RunConfig):
        if not samples:
            raise DataError("training split is empty")
        self.images = [s.image() for s in samples]
        self.labels = [s.label() for s in samples]
        self.ids = [s.sample_id for s in samples]
        self.policy = AugmentationPolicy(
            crop_hw=(cfg.crop_h, cfg.crop_w),
            scale_range=(cfg.aug_scale_min, cfg.aug_scale_max),
            flip_prob=cfg.flip_prob)
        self.batch = cfg.batch_size
        self.order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
        self.aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 12]))
        self._queue: list[int] = []

    def next_batch(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        while len(self._queue) < self.batch:
            self._queue.extend(self.order_rng.permutation(len(self.images)).tolist())
        take, self._queue = self._queue[:self.batch], self._queue[self.batch:]
        images, labels = [], []
        for idx in take:
            img, lbl = augment(self.policy, self.images[idx],
                               self.labels[idx].astype(np.int64), self.aug_rng)
            images.append(img)
            labels.append(lbl)
        return np.stack(images), np.stack(labels), [self.ids[i] for i in take]


def train_run(cfg: RunConfig, data_dir: Path, out_dir: Path, baseline: bool = False,
              quiet: bool = False) -> Path:
    """Train to cfg.max_iterations; returns the final checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        raise StateError(f"run directory {out_dir} is locked by another writer "
                         f"(remove {lock} if stale)") from None

    try:
        splits = load_corpus(Path(data_dir))
        if "train" not in splits:
            raise DataError(f"no train split in {data_dir}")
        stream = _BatchStream(splits["train"], cfg)

        dis_net, seg_net = build_nets(cfg)
        params = seg_net.params() if baseline else dis_net.params() + seg_net.params()
        named = seg_net.named_params() if baseline else dis_net.named_params() + seg_net.named_params()
        optimizer = AdamW(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                          eps=cfg.eps, weight_decay=cfg.weight_decay)
        weights = SodWeights(w_dis=cfg.w_dis, w_ret=cfg.w_ret, w_smooth=cfg.w_smooth,
                             w_sede=cfg.w_sede, lambda_g=cfg.lambda_g,
                             lambda_ill=cfg.lambda_ill)
        noise_cfg = GuidanceNoiseConfig(smooth_cell=cfg.noise_smooth_cell)
        step_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13]))
        tape = Tape()
        mode = "baseline" if baseline else "dtp"
        csv_rows = [LOSS_CSV_HEADER]
        started = time.time()

        for step in range(1, cfg.max_iterations + 1):
            images, labels, ids = stream.next_batch()
            try:
                if baseline:
                    terms = baseline_train_step(seg_net, optimizer, images, labels,
                                                cfg.lambda_ill, cfg.ignore_index, tape)
                else:
                    schedule = DisturbSchedule(t=min(step - 1, cfg.max_iterations),
                                               t_max=cfg.max_iterations)
                    terms = sod_train_step(dis_net, seg_net, optimizer, images, labels,
                                           schedule, weights, noise_cfg, step_rng,
                                           tape=tape, ignore_index=cfg.ignore_index)
            except ContractError as exc:
                diag = out_dir / "nan_diagnostic.txt"
                diag.write_text(f"step {step}\nbatch ids: {ids}\nerror: {exc}\n")
                raise DataError(f"aborted at step {step}: {exc}; "
                                f"offending batch recorded in {diag}") from exc
            csv_rows.append(terms.csv_row(step))
            if not quiet and (step % cfg.log_every == 0 or step == 1):
                rate = step / (time.time() - started)
                print(f"[{mode}] step {step}/{cfg.max_iterations} "
                      f"total {terms.total:.4f} ({rate:.2f} it/s)", flush=True)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 \
                    and step < cfg.max_iterations:
                save_checkpoint(out_dir / f"checkpoint_{step:06d}.ckpt", cfg.to_dict(),
                                named, optimizer.state, step, mode)

        (out_dir / "loss.csv").write_text("\n".join(csv_rows) + "\n")
        final = out_dir / "checkpoint_final.ckpt"
        save_checkpoint(final, cfg.to_dict(), named, optimizer.state,
                        cfg.max_iterations, mode)
        return final
    finally:
        lock.unlink(missing_ok=True)
