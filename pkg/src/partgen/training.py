"""Stage-wise training: ELBO assembly, cyclic KL annealing, freeze rule.

Three stages share one loop skeleton: deterministic batching from a seed,
per-epoch metrics records (JSON lines), a checkpoint per epoch with the best
validation loss retained, and a NaN abort that points at the last good
checkpoint. The KL weight follows a cyclic ramp-and-plateau schedule and is
frozen whenever validation loss exceeds training loss by more than the
configured threshold.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import layout_model as lm
from . import mask_model as mm
from . import translator as tr
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import AugmentConfig, CategorySchema, ObjectSample, augment
from .labelmap import compose_label_map

STAGES = ("box", "labelmap", "label2obj")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainingConfig:
    stage: str
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int = 0
    cycle_count: int = 4
    ramp_fraction: float = 0.5
    lambda_max: float = 1.0
    freeze_threshold: float = 0.1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 5.0  # applied to the recurrent stage
    decay_epochs: int = 0  # label2obj: linear learning-rate decay tail
    lambda_disc_feat: float = 10.0
    lambda_perc_feat: float = 10.0
    augment: AugmentConfig | None = None
    augment_online: bool = True  # re-draw augmentations each epoch

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("learning rate and batch size must be positive, epochs >= 0")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ValueError("ramp_fraction must lie in (0, 1]")
        if self.cycle_count <= 0 or self.lambda_max < 0:
            raise ValueError("cycle_count must be positive and lambda_max nonnegative")

    def to_dict(self) -> dict:
        d = {
            "stage": self.stage,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "cycle_count": self.cycle_count,
            "ramp_fraction": self.ramp_fraction,
            "lambda_max": self.lambda_max,
            "freeze_threshold": self.freeze_threshold,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "grad_clip": self.grad_clip,
            "decay_epochs": self.decay_epochs,
            "lambda_disc_feat": self.lambda_disc_feat,
            "lambda_perc_feat": self.lambda_perc_feat,
            "augment": self.augment.__dict__ if self.augment else None,
            "augment_online": self.augment_online,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if d.get("augment"):
            a = d["augment"]
            d["augment"] = AugmentConfig(
                translate_range=a.get("translate_range", 0.0),
                part_scale_range=tuple(a.get("part_scale_range", (1.0, 1.0))),
                object_scale_range=tuple(a.get("object_scale_range", (1.0, 1.0))),
                mirror_prob=a.get("mirror_prob", 0.0),
            )
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


def default_config(stage: str) -> TrainingConfig:
    """Stage defaults: the published training hyperparameters."""
    if stage == "box":
        return TrainingConfig(stage="box", learning_rate=1e-4, epochs=300, batch_size=32)
    if stage == "labelmap":
        return TrainingConfig(stage="labelmap", learning_rate=1e-3, epochs=110, batch_size=8)
    if stage == "label2obj":
        return TrainingConfig(
            stage="label2obj", learning_rate=2e-4, epochs=8, decay_epochs=4, batch_size=16
        )
    raise ValueError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------------------
# Annealing schedule + freeze rule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnealState:
    step: int = 0
    lambda_current: float = 0.0
    frozen: bool = False


def cyclic_lambda(step: int, total_steps: int, config: TrainingConfig) -> float:
    """KL weight at `step`: within each cycle a linear ramp from 0 to
    lambda_max over `ramp_fraction` of the cycle, then a plateau at lambda_max.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    cycle_len = total_steps / config.cycle_count
    position = (step % cycle_len) / cycle_len
    return config.lambda_max * min(position / config.ramp_fraction, 1.0)


def update_freeze(
    state: AnnealState, train_loss: float, val_loss: float, config: TrainingConfig
) -> AnnealState:
    """Freeze the KL weight while val - train exceeds the threshold (strictly)."""
    return replace(state, frozen=(val_loss - train_loss) > config.freeze_threshold)


def scale_boxes_for_rendering(graph, canvas: float = 500.0) -> np.ndarray:
    """Normalized boxes scaled to the preview canvas (500 x 500 by default)."""
    return np.asarray(graph.boxes, dtype=np.float64) * canvas


# ---------------------------------------------------------------------------
# Model construction + checkpoint helpers
# ---------------------------------------------------------------------------


def category_slot_table(schemas: list[CategorySchema]) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(int(s) for s in sch.part_slots) for sch in schemas)


def default_layout_config(schemas: list[CategorySchema], p: int, **overrides) -> lm.LayoutModelConfig:
    base = lm.LayoutModelConfig(
        p=p, n_categories=len(schemas), category_slots=category_slot_table(schemas)
    )
    return replace(base, **overrides) if overrides else base


def default_mask_config(
    schemas: list[CategorySchema], p: int, mask_resolution: int = 64, **overrides
) -> mm.MaskModelConfig:
    base = mm.MaskModelConfig(
        p=p, n_categories=len(schemas), mask_resolution=mask_resolution
    )
    return replace(base, **overrides) if overrides else base


def default_translator_config(schemas: list[CategorySchema], p: int, **overrides) -> tr.TranslatorConfig:
    base = tr.TranslatorConfig(p=p, n_categories=len(schemas))
    return replace(base, **overrides) if overrides else base


def _state_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {
        k[len(prefix) :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)
    }
    module.load_state_dict(state)


def save_layout_model(path: Path, model: lm.LayoutVAE) -> None:
    save_checkpoint(path, "layout", model.cfg.to_dict(), _state_tensors(model))


def load_layout_model(path: str | Path) -> lm.LayoutVAE:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "layout":
        raise ValueError(f"{path}: expected a layout checkpoint, found {ckpt.kind!r}")
    model = lm.LayoutVAE(lm.LayoutModelConfig.from_dict(ckpt.config))
    _load_state(model, ckpt.tensors)
    model.eval()
    return model


def save_mask_model(path: Path, model: mm.MaskVAE) -> None:
    save_checkpoint(path, "mask", model.cfg.to_dict(), _state_tensors(model))


def load_mask_model(path: str | Path) -> mm.MaskVAE:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "mask":
        raise ValueError(f"{path}: expected a mask checkpoint, found {ckpt.kind!r}")
    model = mm.MaskVAE(mm.MaskModelConfig.from_dict(ckpt.config))
    _load_state(model, ckpt.tensors)
    model.eval()
    return model


def save_translator(path: Path, generator: tr.Generator, discriminator: tr.Discriminator) -> None:
    tensors = _state_tensors(generator, "generator.")
    tensors.update(_state_tensors(discriminator, "discriminator."))
    save_checkpoint(path, "translator", generator.cfg.to_dict(), tensors)


def load_translator(path: str | Path) -> tr.Generator:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "translator":
        raise ValueError(f"{path}: expected a translator checkpoint, found {ckpt.kind!r}")
    gen = tr.Generator(tr.TranslatorConfig.from_dict(ckpt.config))
    _load_state(gen, ckpt.tensors, "generator.")
    gen.eval()
    return gen


def load_translator_pair(path: str | Path) -> tuple[tr.Generator, tr.Discriminator]:
    ckpt = load_checkpoint(path)
    cfg = tr.TranslatorConfig.from_dict(ckpt.config)
    gen, disc = tr.Generator(cfg), tr.Discriminator(cfg)
    _load_state(gen, ckpt.tensors, "generator.")
    _load_state(disc, ckpt.tensors, "discriminator.")
    return gen, disc


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def _layout_tensors(samples: list[ObjectSample], p: int):
    X = torch.from_numpy(np.stack([s.graph.X for s in samples])).to(torch.float32)
    A = torch.from_numpy(np.stack([s.graph.A for s in samples])).to(torch.float32)
    cat = torch.tensor([s.category for s in samples], dtype=torch.long)
    presence = X[:, :, 0]
    return X, A, cat, presence


def _mask_tensors(samples: list[ObjectSample], p: int, m: int):
    masks = torch.from_numpy(
        np.stack([mm.sample_to_tensors(s.masks.masks, p, m) for s in samples])
    )
    boxes = torch.from_numpy(np.stack([s.graph.boxes for s in samples])).to(torch.float32)
    cat = torch.tensor([s.category for s in samples], dtype=torch.long)
    presence = torch.from_numpy(np.stack([s.graph.presence for s in samples])).to(torch.float32)
    return masks, boxes, cat, presence


def _translator_tensors(samples: list[ObjectSample], p: int, resolution: int):
    maps, images, cats = [], [], []
    for s in samples:
        if s.image is None:
            raise ValueError("label2obj training needs samples with images")
        tensor = compose_label_map(
            s.masks.masks, s.graph.boxes, s.graph.presence, s.category, resolution, p
        )
        maps.append(tensor.canvas.transpose(2, 0, 1).astype(np.float32))
        img = s.image
        if img.shape[0] != resolution:
            img = np.asarray(
                torch.nn.functional.interpolate(
                    torch.from_numpy(img.transpose(2, 0, 1)).unsqueeze(0).float(),
                    size=(resolution, resolution),
                    mode="nearest",
                )[0]
            ).transpose(1, 2, 0)
        images.append(img.transpose(2, 0, 1).astype(np.float32) / 127.5 - 1.0)
        cats.append(s.category)
    return (
        torch.from_numpy(np.stack(maps)),
        torch.from_numpy(np.stack(images)),
        torch.tensor(cats, dtype=torch.long),
    )


def _epoch_samples(
    samples: list[ObjectSample], config: TrainingConfig, rng: np.random.Generator, epoch: int
) -> list[ObjectSample]:
    if config.augment is None:
        return samples
    if not config.augment_online and epoch > 0:
        return samples
    return [augment(s, config.augment, rng) for s in samples]


# ---------------------------------------------------------------------------
# Stage loops
# ---------------------------------------------------------------------------


@dataclass
class StageResult:
    checkpoint_dir: Path  # best-on-validation
    last_dir: Path
    metrics: list[dict] = field(default_factory=list)


class _MetricsLog:
    def __init__(self, path: Path, config: TrainingConfig, extra: dict):
        self.path = path
        self.records: list[dict] = []
        header = {"type": "header", "config": config.to_dict(), **extra}
        path.write_text(json.dumps(header) + "\n")

    def record(self, rec: dict) -> None:
        self.records.append(rec)
        with self.path.open("a") as f:
            f.write(json.dumps(rec) + "\n")


def _check_finite(loss: torch.Tensor, where: str, last_good: Path | None) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at {where}; training aborted, last good checkpoint: {last_good}",
            last_good,
        )


def train_stage(
    stage: str,
    train_samples: list[ObjectSample],
    val_samples: list[ObjectSample],
    schemas: list[CategorySchema],
    p: int,
    config: TrainingConfig,
    out_dir: str | Path,
    model_overrides: dict | None = None,
) -> StageResult:
    """Train one stage; returns best/last checkpoint directories and metrics."""
    config.validate()
    if config.stage != stage:
        raise ValueError(f"config is for stage {config.stage!r}, requested {stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    if stage == "box":
        return _train_box(train_samples, val_samples, schemas, p, config, out_dir, model_overrides)
    if stage == "labelmap":
        return _train_labelmap(train_samples, val_samples, schemas, p, config, out_dir, model_overrides)
    return _train_label2obj(train_samples, val_samples, schemas, p, config, out_dir, model_overrides)


def _vae_loop(
    stage: str,
    model: torch.nn.Module,
    save_fn,
    batch_loss_fn,
    eval_recon_fn,
    n_train: int,
    config: TrainingConfig,
    out_dir: Path,
    log: _MetricsLog,
    rebuild_epoch_fn,
) -> StageResult:
    opt = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps
    )
    best_dir, last_dir = out_dir / "best", out_dir / "last"
    save_fn(last_dir, model)
    save_fn(best_dir, model)
    if config.epochs == 0:
        return StageResult(checkpoint_dir=best_dir, last_dir=last_dir, metrics=log.records)

    order_rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 1)
    batches_per_epoch = max(1, math.ceil(n_train / config.batch_size))
    total_steps = config.epochs * batches_per_epoch
    state = AnnealState()
    best_val = math.inf

    for epoch in range(config.epochs):
        t0 = time.monotonic()
        train_data = rebuild_epoch_fn(epoch, order_rng)
        order = order_rng.permutation(n_train)
        epoch_recon, epoch_kl, lam = 0.0, 0.0, state.lambda_current
        model.train()
        for b in range(batches_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            if len(idx) == 0:
                continue
            if state.frozen:
                lam = state.lambda_current
            else:
                lam = cyclic_lambda(state.step, total_steps, config)
            recon, kl = batch_loss_fn(model, train_data, idx, noise_gen)
            loss = recon + lam * kl
            _check_finite(loss, f"epoch {epoch} step {state.step}", last_dir)
            opt.zero_grad()
            loss.backward()
            if stage == "labelmap" and config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            epoch_recon += float(recon.detach()) * len(idx)
            epoch_kl += float(kl.detach()) * len(idx)
            state = replace(state, step=state.step + 1, lambda_current=lam)

        model.eval()
        train_loss = epoch_recon / n_train
        val_recon, val_kl = eval_recon_fn(model, epoch)
        state = update_freeze(state, train_loss, val_recon, config)
        seconds = time.monotonic() - t0
        log.record(
            {
                "type": "epoch",
                "epoch": epoch,
                "train_loss": train_loss,
                "train_kl": epoch_kl / n_train,
                "val_loss": val_recon,
                "val_kl": val_kl,
                "lambda": lam,
                "frozen": state.frozen,
                "seconds": round(seconds, 3),
            }
        )
        save_fn(last_dir, model)
        total_val = val_recon + lam * val_kl
        if total_val < best_val:
            best_val = total_val
            save_fn(best_dir, model)
    return StageResult(checkpoint_dir=best_dir, last_dir=last_dir, metrics=log.records)


def _train_box(train, val, schemas, p, config, out_dir, overrides) -> StageResult:
    cfg = default_layout_config(schemas, p, **(overrides or {}))
    model = lm.LayoutVAE(cfg)
    log = _MetricsLog(out_dir / "metrics.jsonl", config, {"stage": "box", "model": cfg.to_dict()})
    base_train = train
    fixed = _layout_tensors(train, p) if config.augment is None else None

    def rebuild(epoch, rng):
        if fixed is not None:
            return fixed
        return _layout_tensors(_epoch_samples(base_train, config, rng, epoch), p)

    val_data = _layout_tensors(val, p) if val else None

    def batch_loss(model, data, idx, noise_gen):
        X, A, cat, presence = data
        noise = torch.randn(len(idx), cfg.d_z, generator=noise_gen)
        out, post = model(X[idx], A[idx], cat[idx], presence[idx], noise)
        recon = lm.reconstruction_loss(out, X[idx], A[idx], presence[idx])
        kl = lm.kl_diag_gaussian(post.mu, post.log_var)
        return recon, kl

    def eval_recon(model, epoch):
        data = val_data or rebuild(0, np.random.default_rng(config.seed))
        X, A, cat, presence = data
        gen = torch.Generator().manual_seed(config.seed * 1009 + epoch)
        with torch.no_grad():
            noise = torch.randn(X.shape[0], cfg.d_z, generator=gen)
            out, post = model(X, A, cat, presence, noise)
            recon = lm.reconstruction_loss(out, X, A, presence)
            kl = lm.kl_diag_gaussian(post.mu, post.log_var)
        return float(recon), float(kl)

    def save_fn(path, model):
        save_layout_model(path, model)

    return _vae_loop(
        "box", model, save_fn, batch_loss, eval_recon, len(train), config, out_dir, log, rebuild
    )


def _train_labelmap(train, val, schemas, p, config, out_dir, overrides) -> StageResult:
    m = train[0].masks.resolution if train else 64
    cfg = default_mask_config(schemas, p, mask_resolution=m, **(overrides or {}))
    model = mm.MaskVAE(cfg)
    log = _MetricsLog(
        out_dir / "metrics.jsonl", config, {"stage": "labelmap", "model": cfg.to_dict()}
    )
    base_train = train
    fixed = _mask_tensors(train, p, cfg.mask_resolution) if config.augment is None else None

    def rebuild(epoch, rng):
        if fixed is not None:
            return fixed
        return _mask_tensors(_epoch_samples(base_train, config, rng, epoch), p, cfg.mask_resolution)

    val_data = _mask_tensors(val, p, cfg.mask_resolution) if val else None

    def batch_loss(model, data, idx, noise_gen):
        masks, boxes, cat, presence = data
        noise = torch.randn(len(idx), cfg.d_m, generator=noise_gen)
        pred, post = model(masks[idx], boxes[idx], cat[idx], noise)
        recon = mm.mask_nll(pred, masks[idx], presence[idx])
        kl = lm.kl_diag_gaussian(post.mu, post.log_var)
        return recon, kl

    def eval_recon(model, epoch):
        data = val_data or rebuild(0, np.random.default_rng(config.seed))
        masks, boxes, cat, presence = data
        gen = torch.Generator().manual_seed(config.seed * 1009 + epoch)
        with torch.no_grad():
            noise = torch.randn(masks.shape[0], cfg.d_m, generator=gen)
            pred, post = model(masks, boxes, cat, noise)
            recon = mm.mask_nll(pred, masks, presence)
            kl = lm.kl_diag_gaussian(post.mu, post.log_var)
        return float(recon), float(kl)

    def save_fn(path, model):
        save_mask_model(path, model)

    return _vae_loop(
        "labelmap", model, save_fn, batch_loss, eval_recon, len(train), config, out_dir, log, rebuild
    )


def _train_label2obj(train, val, schemas, p, config, out_dir, overrides) -> StageResult:
    cfg = default_translator_config(schemas, p, **(overrides or {}))
    gen, disc = tr.Generator(cfg), tr.Discriminator(cfg)
    perceptual = tr.RandomPerceptualFeatures(seed=config.seed)
    log = _MetricsLog(
        out_dir / "metrics.jsonl",
        config,
        {"stage": "label2obj", "model": cfg.to_dict(), "perceptual": "random-cnn"},
    )
    maps, images, cats = _translator_tensors(train, p, cfg.out_resolution)
    val_tensors = _translator_tensors(val, p, cfg.out_resolution) if val else (maps, images, cats)

    total_epochs = config.epochs + config.decay_epochs
    best_dir, last_dir = out_dir / "best", out_dir / "last"
    save_translator(last_dir, gen, disc)
    save_translator(best_dir, gen, disc)
    if total_epochs == 0:
        return StageResult(checkpoint_dir=best_dir, last_dir=last_dir, metrics=log.records)

    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))

    def lr_factor(epoch: int) -> float:
        if epoch < config.epochs or config.decay_epochs == 0:
            return 1.0
        return max(0.0, 1.0 - (epoch - config.epochs + 1) / config.decay_epochs)

    order_rng = np.random.default_rng(config.seed)
    n = maps.shape[0]
    batches_per_epoch = max(1, math.ceil(n / config.batch_size))
    best_val = math.inf

    for epoch in range(total_epochs):
        t0 = time.monotonic()
        factor = lr_factor(epoch)
        for group in list(opt_g.param_groups) + list(opt_d.param_groups):
            group["lr"] = config.learning_rate * factor
        order = order_rng.permutation(n)
        ep_d, ep_g, ep_l1 = 0.0, 0.0, 0.0
        gen.train(), disc.train()
        for b in range(batches_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            if len(idx) == 0:
                continue
            lm_b, img_b, cat_b = maps[idx], images[idx], cats[idx]

            fake = gen(lm_b, cat_b)
            real_scores, real_feats = disc(lm_b, img_b, cat_b)
            fake_scores_d, _ = disc(lm_b, fake.detach(), cat_b)
            d_loss = tr.hinge_d_loss(real_scores, fake_scores_d)
            _check_finite(d_loss, f"epoch {epoch} discriminator", last_dir)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            fake_scores_g, fake_feats = disc(lm_b, fake, cat_b)
            with torch.no_grad():
                _, real_feats_ref = disc(lm_b, img_b, cat_b)
                perc_real = [f.detach() for f in perceptual(img_b)]
            g_loss = tr.generator_loss(
                fake_scores_g,
                (tr.flatten_features(real_feats_ref), tr.flatten_features(fake_feats)),
                (perc_real, perceptual(fake)),
                lambda_disc_feat=config.lambda_disc_feat,
                lambda_perc_feat=config.lambda_perc_feat,
            )
            _check_finite(g_loss, f"epoch {epoch} generator", last_dir)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            ep_d += float(d_loss.detach()) * len(idx)
            ep_g += float(g_loss.detach()) * len(idx)
            ep_l1 += float((fake.detach() - img_b).abs().mean()) * len(idx)

        gen.eval(), disc.eval()
        with torch.no_grad():
            vm, vi, vc = val_tensors
            val_l1 = float((gen(vm, vc) - vi).abs().mean())
        seconds = time.monotonic() - t0
        log.record(
            {
                "type": "epoch",
                "epoch": epoch,
                "d_loss": ep_d / n,
                "g_loss": ep_g / n,
                "train_l1": ep_l1 / n,
                "val_l1": val_l1,
                "lr_factor": factor,
                "seconds": round(seconds, 3),
            }
        )
        save_translator(last_dir, gen, disc)
        if val_l1 < best_val:
            best_val = val_l1
            save_translator(best_dir, gen, disc)
    return StageResult(checkpoint_dir=best_dir, last_dir=last_dir, metrics=log.records)
