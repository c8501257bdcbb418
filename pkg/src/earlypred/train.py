"""Two-stage optimization: supervised pre-training, then adversarial training.

Stage 1 fits the segment encoder and the perceptual head on complete
sequences with momentum SGD and a step learning-rate schedule. Stage 2
alternates one generator update (adversarial term plus ``lam`` times the
classification loss on partial views) with ``d_steps`` discriminator updates
that separate complete-sequence features from generated ones.
"""

from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .data import Dataset
from .diffcore import (Parameter, adam_step, gan_loss_grads, gan_losses, generator_adv_grad, generator_adv_loss, sgd_step,
                       softmax_cross_entropy)
from .model import ModelBundle, _time_major

ADV_FORMS = ("non_saturating", "saturating")


class NumericalDivergence(RuntimeError):
    """A loss became NaN or infinite during training."""


@dataclass
class TrainConfig:
    # stage 1: momentum SGD with step decay
    lr1: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.1
    lr_step: int = 300
    iters1: int = 1200
    # stage 2: Adam
    lr2: float = 1e-4
    weight_decay2: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 1.0
    d_steps: int = 3
    iters2: int = 3000
    batch: int = 64
    seed: int = 0
    freeze_encoder: bool = True
    freeze_perceptual: bool = False
    adv_form: str = "non_saturating"
    include_full_views: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr1 < 0 or self.lr2 < 0:
            raise ValueError("learning rates must be non-negative")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.d_steps < 1:
            raise ValueError("d_steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr_step < 1:
            raise ValueError("lr_step must be >= 1")
        if self.adv_form not in ADV_FORMS:
            raise ValueError(f"adv_form must be one of {ADV_FORMS}")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Full-scale schedule: decay by 10x every 4500 iterations, stop at 18000."""
        base = dict(lr1=1e-3, momentum=0.9, weight_decay=5e-4, lr_decay=0.1, lr_step=4500, iters1=18000,
                    lr2=1e-4, weight_decay2=5e-4, lam=1.0, d_steps=3, batch=64)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def stage1_lr(self, it: int) -> float:
        return self.lr1 * self.lr_decay ** (it // self.lr_step)


LOG_COLUMNS = ("stage", "iter", "lr", "loss_cls", "acc", "loss_D", "loss_G_adv", "loss_G_total", "d_real",
               "d_fake")


@dataclass
class TrainLog:
    records: list[dict[str, Any]] = field(default_factory=list)
    wall_clock: dict[str, float] = field(default_factory=dict)

    def append(self, **rec) -> None:
        stage, it = rec["stage"], rec["iter"]
        prev = [r["iter"] for r in self.records if r["stage"] == stage]
        if prev and it <= prev[-1]:
            raise ValueError(f"iterations must increase within stage {stage!r}")
        self.records.append(rec)

    def extend(self, other: "TrainLog") -> None:
        for r in other.records:
            self.append(**r)
        self.wall_clock.update(other.wall_clock)

    def stage(self, name: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["stage"] == name]

    def column(self, stage: str, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.stage(stage)], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow(["" if r.get(c) is None else (repr(float(r[c])) if isinstance(r[c], float) else r[c])
                        for c in LOG_COLUMNS])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {"stage": row["stage"], "iter": int(row["iter"])}
                for c in LOG_COLUMNS[2:]:
                    rec[c] = float(row[c]) if row[c] != "" else None
                log.records.append(rec)
        return log


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


class EpochSampler:
    """Index stream over ``range(n)``: a fresh permutation per epoch, batches wrap across epochs."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample from an empty pool")
        self.n = n
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def draw(self, batch: int) -> np.ndarray:
        out = np.empty(batch, dtype=np.int64)
        filled = 0
        while filled < batch:
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            take = min(batch - filled, self.n - self._pos)
            out[filled:filled + take] = self._perm[self._pos:self._pos + take]
            self._pos += take
            filled += take
        return out


class ViewBatcher:
    """Samples partial-view (fake) and complete-sequence (real) minibatches from one dataset."""

    def __init__(self, ds: Dataset, rng: np.random.Generator, include_full_views: bool = True):
        if len(ds) == 0:
            raise ValueError("empty training set")
        self.raw = ds.raw()
        self.labels = ds.labels()
        K = ds.n_segments
        top = K if include_full_views or K == 1 else K - 1
        seq, lev = np.meshgrid(np.arange(len(ds)), np.arange(1, top + 1), indexing="ij")
        self.view_seq = seq.reshape(-1)
        self.view_k = lev.reshape(-1)
        view_rng, real_rng = rng.spawn(2)
        self.views = EpochSampler(len(self.view_seq), view_rng)
        self.reals = EpochSampler(len(ds), real_rng)

    def fake_batch(self, batch: int):
        idx = self.views.draw(batch)
        s = self.view_seq[idx]
        return self.raw[s], self.view_k[idx], self.labels[s]

    def real_batch(self, batch: int) -> np.ndarray:
        return self.reals.draw(batch)


def make_batch(batcher: ViewBatcher, batch: int):
    """``(fake raw, fake levels, labels, real sequence indices)`` for one step."""
    raw, k, labels = batcher.fake_batch(batch)
    return raw, k, labels, batcher.real_batch(batch)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _zero(params) -> None:
    for p in params:
        p.zero_grad()


def _check(name: str, value: float, stage: str, it: int) -> None:
    if not np.isfinite(value):
        raise NumericalDivergence(f"{name} became {value} at {stage} iteration {it}")


def param_checksum(params: list[Parameter]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.value.tobytes())
    return h.hexdigest()


def full_features(bundle: ModelBundle, raw: np.ndarray) -> np.ndarray:
    z, _ = bundle.generator.full_features(_time_major(raw))
    return z


def full_video_accuracy(bundle: ModelBundle, ds: Dataset) -> float:
    z = full_features(bundle, ds.raw())
    probs = bundle.perceptual.forward(z)
    return float((probs.argmax(axis=1) == ds.labels()).mean())


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def stage1_pretrain(bundle: ModelBundle, train: Dataset, cfg: TrainConfig) -> TrainLog:
    """Cross-entropy on complete sequences; updates the encoder and perceptual head."""
    t0 = time.perf_counter()
    log = TrainLog()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    sampler = EpochSampler(len(train), rng)
    raw_all, labels_all = train.raw(), train.labels()
    G, P = bundle.generator, bundle.perceptual
    params = G.encoder_parameters() + P.parameters()
    for it in range(cfg.iters1):
        idx = sampler.draw(cfg.batch)
        _zero(params)
        z, zc = G.full_features(_time_major(raw_all[idx]))
        logits, pc = P.logits(z)
        loss, probs, dlogits = softmax_cross_entropy(logits, labels_all[idx])
        _check("stage-1 classification loss", loss, "stage1", it)
        dz = P.backward_logits(dlogits, pc)
        G.full_features_backward(dz, zc)
        lr = cfg.stage1_lr(it)
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        acc = float((probs.argmax(axis=1) == labels_all[idx]).mean())
        log.append(stage="stage1", iter=it, lr=lr, loss_cls=loss, acc=acc)
    _zero(params)
    log.append(stage="stage1-eval", iter=max(cfg.iters1 - 1, 0), acc=full_video_accuracy(bundle, train))
    log.wall_clock["stage1_seconds"] = time.perf_counter() - t0
    return log


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


class AdversarialTrainer:
    """Holds the stage-2 state so generator and discriminator steps can be driven separately."""

    def __init__(self, bundle: ModelBundle, train: Dataset, cfg: TrainConfig):
        self.bundle = bundle
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        self.batcher = ViewBatcher(train, rng, cfg.include_full_views)
        G, P, D = bundle.generator, bundle.perceptual, bundle.discriminator
        self.g_params = G.sequence_parameters()
        if not cfg.freeze_encoder:
            self.g_params = G.encoder_parameters() + self.g_params
        if not cfg.freeze_perceptual:
            self.g_params = self.g_params + P.parameters()
        self.d_params = D.parameters()
        self._reals = full_features(bundle, self.batcher.raw) if cfg.freeze_encoder else None

    def reals(self, idx: np.ndarray) -> np.ndarray:
        if self._reals is not None:
            return self._reals[idx]
        return full_features(self.bundle, self.batcher.raw[idx])

    def _adam(self, params) -> None:
        c = self.cfg
        adam_step(params, c.lr2, c.beta1, c.beta2, c.adam_eps, c.weight_decay2)

    def generator_step(self, it: int = 0) -> dict[str, float]:
        c = self.cfg
        G, P, D = self.bundle.generator, self.bundle.perceptual, self.bundle.discriminator
        raw, k, labels = self.batcher.fake_batch(c.batch)
        _zero(self.g_params)
        _zero(self.d_params)
        g, gc = G.forward(_time_major(raw), k)
        d_fake, dc = D.forward(g)
        logits, pc = P.logits(g)
        loss_cls, _, dlogits = softmax_cross_entropy(logits, labels)
        loss_adv = generator_adv_loss(d_fake, c.adv_form)
        total = loss_adv + c.lam * loss_cls
        _check("generator loss", total, "stage2", it)
        dg = D.backward(generator_adv_grad(d_fake, c.adv_form), dc) + P.backward_logits(c.lam * dlogits, pc)
        G.backward(dg, gc, encoder=not c.freeze_encoder)
        self._adam(self.g_params)
        # the discriminator only served as a loss here
        _zero(self.d_params)
        return {"loss_cls": loss_cls, "loss_G_adv": loss_adv, "loss_G_total": total}

    def discriminator_step(self, it: int = 0) -> dict[str, float]:
        c = self.cfg
        G, D = self.bundle.generator, self.bundle.discriminator
        raw, k, _ = self.batcher.fake_batch(c.batch)
        g, _ = G.forward(_time_major(raw), k)
        z = self.reals(self.batcher.real_batch(c.batch))
        _zero(self.d_params)
        d_real, rc = D.forward(z)
        d_fake, fc = D.forward(g)
        loss_d, _ = gan_losses(d_real, d_fake, c.adv_form)
        _check("discriminator loss", loss_d, "stage2", it)
        dd_real, dd_fake, _ = gan_loss_grads(d_real, d_fake, c.adv_form)
        D.backward(dd_real, rc, need_dx=False)
        D.backward(dd_fake, fc, need_dx=False)
        self._adam(self.d_params)
        _zero(self.d_params)
        return {"loss_D": loss_d, "d_real": float(d_real.mean()), "d_fake": float(d_fake.mean())}


def stage2_adversarial(bundle: ModelBundle, train: Dataset, cfg: TrainConfig) -> TrainLog:
    t0 = time.perf_counter()
    log = TrainLog()
    trainer = AdversarialTrainer(bundle, train, cfg)
    for it in range(cfg.iters2):
        g = trainer.generator_step(it)
        for _ in range(cfg.d_steps):
            d = trainer.discriminator_step(it)
        log.append(stage="stage2", iter=it, lr=cfg.lr2, **g, **d)
    log.wall_clock["stage2_seconds"] = time.perf_counter() - t0
    return log


def train_discriminator(bundle: ModelBundle, train: Dataset, cfg: TrainConfig, steps: int) -> TrainLog:
    """Discriminator-only stage-2 updates with the generator held fixed."""
    log = TrainLog()
    trainer = AdversarialTrainer(bundle, train, cfg)
    for it in range(steps):
        log.append(stage="disc-only", iter=it, lr=cfg.lr2, **trainer.discriminator_step(it))
    return log


def discriminator_gap(bundle: ModelBundle, ds: Dataset, batch: int = 256, seed: int = 0) -> float:
    """``mean D(real) - mean D(fake)`` on a sampled batch of complete and partial views of ``ds``."""
    rng = np.random.default_rng(seed)
    raw = ds.raw()
    n, K = raw.shape[0], ds.n_segments
    fi = rng.integers(0, n, size=batch)
    k = rng.integers(1, K + 1, size=batch)
    ri = rng.integers(0, n, size=batch)
    G, D = bundle.generator, bundle.discriminator
    g, _ = G.forward(_time_major(raw[fi]), k)
    z = full_features(bundle, raw[ri])
    d_real, _ = D.forward(z)
    d_fake, _ = D.forward(g)
    return float(d_real.mean() - d_fake.mean())


def train_two_stage(bundle: ModelBundle, train: Dataset, cfg: TrainConfig, stage1_only: bool = False) -> TrainLog:
    log = stage1_pretrain(bundle, train, cfg)
    if not stage1_only:
        log.extend(stage2_adversarial(bundle, train, cfg))
    return log


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
