"""Adaptation loop: EventBlend supervision, EventMatch min-max updates, EAP entropy, EMA teacher.

Each step pseudo-labels the target batch with the teacher, splices every
(source, target) pair under its similarity mask, updates the two feature
discriminators (step 1), updates the student (step 2) and finally moves the
teacher toward the student.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .blend import IGNORE, blend_voxel_arrays, pseudo_label_array
from .eap import (
    DensityMap,
    density_array,
    high_activation_region,
    mask_array,
    normalize_array,
    similarity_array,
)
from .errors import ConfigError, DomainError, ShapeError, TrainingAbort
from .losses import (
    LossReport,
    adv_loss,
    cross_entropy,
    d1_loss,
    d2_loss,
    masked_mean_entropy,
    total_objective,
    weighted_total,
)
from .net import AdamW, Discriminator, EmaTeacher, SegNet, onecycle_lr, save_checkpoint

log = logging.getLogger(__name__)

FEATURE_TAPS = ("head", "encoder")
FORCE_MASK = (None, "ones", "zeros")


@dataclass
class TrainConfig:
    tau: float = 0.4
    lam: float = 0.01
    phi1: float = 1e-3
    phi2: float = 2e-3
    lr: float = 1e-3
    disc_lr: float = 1e-4
    weight_decay: float = 0.01
    batch: int = 8
    iterations: int = 3000
    bins: int = 20
    duration: int = 5_000_000
    num_classes: int = 11
    region_quantile: float = 0.5
    pl_threshold: float = 0.5
    ema_momentum: float = 0.999
    seed: int = 0
    feature_tap: str = "head"
    blend: bool = True
    force_mask: str | None = None
    density_norm: str = "max"
    eap_on_blend: bool = False
    eval_with: str = "teacher"
    widths: tuple = (16, 32)
    patch: int = 4
    feat_channels: int = 32
    disc_width: int = 32
    eval_batch: int = 32
    checkpoint_every: int = 0
    val_ratio: float = 0.4
    jobs: int = 1
    source_dir: str = ""
    target_dir: str = ""
    out_dir: str = "run"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch <= 0:
            raise ConfigError(f"batch must be positive, got {self.batch}")
        if min(self.lam, self.phi1, self.phi2) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not (self.lr > 0 and self.disc_lr > 0):
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.region_quantile < 1.0:
            raise ConfigError("region_quantile must be in (0, 1)")
        if not 0.0 <= self.pl_threshold <= 1.0:
            raise ConfigError("pl_threshold must be in [0, 1]")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must be in [0, 1]")
        if self.feature_tap not in FEATURE_TAPS:
            raise ConfigError(f"feature_tap must be one of {FEATURE_TAPS}")
        if self.force_mask not in FORCE_MASK:
            raise ConfigError(f"force_mask must be one of {FORCE_MASK}")
        if self.eval_with not in ("teacher", "student"):
            raise ConfigError("eval_with must be 'teacher' or 'student'")
        if self.bins <= 0 or self.duration <= 0:
            raise ConfigError("bins and duration must be positive")
        if not self.widths or self.patch < 1:
            raise ConfigError("need at least one encoder width and a positive patch size")
        normalize_array(np.zeros((1, 1)), self.density_norm)

    @property
    def matching(self) -> bool:
        return self.phi1 > 0 or self.phi2 > 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)


# -- run state -----------------------------------------------------------------------


def _features(net: SegNet, x: torch.Tensor, tap: str):
    """Student forward that exposes the requested feature tap."""
    x = x.contiguous(memory_format=torch.channels_last)
    enc = net.encoder(x)
    feats = net.head(enc)
    logits = net._upsample(net.classifier(feats), x.shape[-2:])
    return (feats if tap == "head" else enc), logits


@dataclass
class RunState:
    cfg: TrainConfig
    student: SegNet
    teacher: EmaTeacher
    disc1: Discriminator
    disc2: Discriminator
    opt: AdamW
    opt_d1: AdamW
    opt_d2: AdamW
    d_tgt: np.ndarray
    region: np.ndarray
    rng: np.random.Generator
    step: int = 0
    history: list = field(default_factory=list)

    def blocks(self) -> dict:
        return {"student": self.student, "teacher": self.teacher.net, "disc1": self.disc1, "disc2": self.disc2}


def init_state(cfg: TrainConfig, target_density: np.ndarray) -> RunState:
    """Seeded initialisation; ``target_density`` is the aggregated target-split density."""
    torch.manual_seed(cfg.seed)
    student = SegNet(cfg.bins, cfg.num_classes, cfg.feat_channels, cfg.widths, cfg.patch)
    tap_ch = cfg.feat_channels if cfg.feature_tap == "head" else cfg.widths[-1]
    disc1 = Discriminator(tap_ch, cfg.disc_width)
    disc2 = Discriminator(tap_ch, cfg.disc_width)
    d_tgt = np.asarray(target_density, np.float64)
    region = high_activation_region(DensityMap(d_tgt), cfg.region_quantile).bits
    return RunState(
        cfg=cfg,
        student=student,
        teacher=EmaTeacher(student, cfg.ema_momentum),
        disc1=disc1,
        disc2=disc2,
        opt=AdamW(student.parameters(), cfg.lr, weight_decay=cfg.weight_decay),
        opt_d1=AdamW(disc1.parameters(), cfg.disc_lr, weight_decay=cfg.weight_decay),
        opt_d2=AdamW(disc2.parameters(), cfg.disc_lr, weight_decay=cfg.weight_decay),
        d_tgt=normalize_array(d_tgt, cfg.density_norm),
        region=region,
        rng=np.random.default_rng(cfg.seed),
    )


def _freeze(module, frozen: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)


@contextlib.contextmanager
def _abort_on_domain_error(term: str, step: int):
    # non-finite features surface as invalid discriminator probabilities
    try:
        yield
    except DomainError as exc:
        raise TrainingAbort(term, f"{exc} at step {step}") from None


def blend_batch(state: RunState, v_src: np.ndarray, y_src: np.ndarray, v_tgt: np.ndarray, probs_tgt=None):
    """Teacher pseudo-labels plus per-pair EventBlend; returns ``(v_blend, y_blend, mask)``."""
    cfg = state.cfg
    if probs_tgt is None:
        _, _, probs_tgt = state.teacher.predict(torch.from_numpy(v_tgt))
    y_pl = pseudo_label_array(probs_tgt.numpy(), cfg.pl_threshold, axis=1)
    if cfg.force_mask == "ones":
        mask = np.ones(y_src.shape, bool)
    elif cfg.force_mask == "zeros":
        mask = np.zeros(y_src.shape, bool)
    else:
        d_src = normalize_array(density_array(v_src), cfg.density_norm)
        sim, defined = similarity_array(d_src, state.d_tgt)
        mask = mask_array(sim, defined, cfg.tau)
    v_blend = blend_voxel_arrays(v_src, v_tgt, mask)
    y_blend = np.where(mask, y_src, y_pl).astype(np.uint8)
    return v_blend, y_blend, mask


def train_step(state: RunState, v_src: np.ndarray, y_src: np.ndarray, v_tgt: np.ndarray) -> LossReport:
    """One min-max iteration on a batch of ``B`` source/target pairs."""
    cfg = state.cfg
    if v_src.shape != v_tgt.shape or v_src.shape[0] != y_src.shape[0] or v_src.shape[-2:] != y_src.shape[-2:]:
        raise ShapeError(f"inconsistent batch: {v_src.shape}, {y_src.shape}, {v_tgt.shape}")
    if state.step >= cfg.iterations:
        raise ConfigError(f"run already finished {cfg.iterations} iterations")
    b = v_src.shape[0]
    match = cfg.matching and cfg.blend

    # (a) the EMA teacher is the target-domain network: pseudo-labels and F^d
    f_tgt = None
    if cfg.blend:
        with torch.no_grad():
            f_tgt, logit_t = _features(state.teacher.net, torch.from_numpy(v_tgt), cfg.feature_tap)
        # (b) density -> similarity -> mask -> blend, per pair
        v_blend, y_blend, mask = blend_batch(state, v_src, y_src, v_tgt, logit_t.softmax(1))

    parts = [v_src] + ([v_blend] if cfg.blend else []) + ([v_tgt] if cfg.lam > 0 else [])
    feats, logits = _features(state.student, torch.cat([torch.from_numpy(p) for p in parts]), cfg.feature_tap)
    logit_src, *rest = torch.split(logits, b)
    f_src, *frest = torch.split(feats, b)
    logit_blend = rest.pop(0) if cfg.blend else None
    f_blend = frest[0] if cfg.blend else None
    logit_tgt = rest.pop(0) if cfg.lam > 0 else None

    zero = torch.zeros(())
    d1 = d2 = zero
    # (c) step 1: discriminators on detached features; the student is untouched
    if match:
        with _abort_on_domain_error("d1", state.step):
            d1 = d1_loss(state.disc1(f_src.detach()), state.disc1(f_blend.detach()))
        with _abort_on_domain_error("d2", state.step):
            d2 = d2_loss(state.disc2(f_blend.detach()), state.disc2(f_tgt))
        for name, v in (("d1", d1), ("d2", d2)):
            if not torch.isfinite(v):
                raise TrainingAbort(name, f"value {float(v)} at step {state.step}")
        state.opt_d1.zero_grad()
        state.opt_d2.zero_grad()
        (d1 + d2).backward()
        state.opt_d1.step()
        state.opt_d2.step()

    # (d) step 2: the student, with both discriminators frozen
    ce_src = cross_entropy(logit_src, torch.from_numpy(y_src))
    ce_blend = cross_entropy(logit_blend, torch.from_numpy(y_blend)) if cfg.blend else zero
    ent = zero
    if cfg.lam > 0:
        region = torch.from_numpy(state.region.copy())
        ent = masked_mean_entropy(logit_tgt.softmax(1), region)
        if cfg.eap_on_blend and cfg.blend:
            ent = 0.5 * (ent + masked_mean_entropy(logit_blend.softmax(1), region & torch.from_numpy(~mask)))
    adv = zero
    if match:
        _freeze(state.disc1, True)
        _freeze(state.disc2, True)
        with _abort_on_domain_error("adv", state.step):
            adv = adv_loss(state.disc1(f_blend), state.disc2(f_blend), cfg.phi1, cfg.phi2)
    parts_t = {"ce_src": ce_src, "ce_blend": ce_blend, "eap_entropy": ent, "d1": d1, "d2": d2, "adv": adv}
    report = total_objective(parts_t, {"lam": cfg.lam, "phi1": cfg.phi1, "phi2": cfg.phi2})
    total = weighted_total(parts_t, cfg.lam)
    state.opt.zero_grad()
    total.backward()
    state.opt.step(onecycle_lr(state.step, cfg.iterations, cfg.lr))
    if match:
        _freeze(state.disc1, False)
        _freeze(state.disc2, False)

    # (e) EMA teacher
    state.teacher.update(state.student)
    state.step += 1
    return report


# -- evaluation --------------------------------------------------------------------------


@torch.no_grad()
def predict_labels(net: SegNet, samples, batch: int = 32) -> np.ndarray:
    """Arg-max predictions for every sample of a :class:`SampleSet`."""
    out = []
    for a in range(0, len(samples), batch):
        v = torch.from_numpy(samples.dense(np.arange(a, min(a + batch, len(samples)))))
        _, logits = net(v)
        out.append(logits.argmax(1).to(torch.uint8).numpy())
    return np.concatenate(out)


def evaluate(net: SegNet, samples, num_classes: int = 11, batch: int = 32) -> dict:
    from .bench.metrics import ConfusionMatrix, metrics

    if samples.labels is None:
        raise ConfigError("evaluation needs labelled samples")
    cm = ConfusionMatrix.zeros(num_classes)
    for a in range(0, len(samples), batch):
        idx = np.arange(a, min(a + batch, len(samples)))
        pred = predict_labels(net, _Subset(samples, idx), batch)
        cm.update(pred, samples.labels[idx])
    return metrics(cm)


class _Subset:
    def __init__(self, samples, idx):
        self.samples, self.idx = samples, idx

    def __len__(self):
        return len(self.idx)

    def dense(self, which):
        return self.samples.dense(self.idx[np.asarray(which)])


# -- driver ------------------------------------------------------------------------------------


def _log_record(step: int, lr: float, report: LossReport) -> str:
    rec = {"step": step, "lr": lr}
    rec.update({k: v for k, v in report.as_dict().items() if k != "weights"})
    # repr round-trips floats exactly, so equal runs give byte-equal logs
    return json.dumps(rec)


def train(cfg: TrainConfig, source, target, target_val=None, out_dir=None, progress_every: int = 0) -> dict:
    """Train on in-memory :class:`SampleSet` objects and return a metrics record.

    With ``out_dir`` the run writes ``train.jsonl``, periodic and final checkpoints,
    ``config.json`` and ``metrics.json`` there.
    """
    torch.use_deterministic_algorithms(True)
    if source.labels is None:
        raise ConfigError("source samples need labels")
    if source.shape != target.shape or source.shape[0] != cfg.bins:
        raise ShapeError(f"source {source.shape} / target {target.shape} do not match T={cfg.bins}")
    state = init_state(cfg, target.mean_density())
    out = Path(out_dir) if out_dir is not None else None
    log_lines = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        from .io import atomic_write

        atomic_write(out / "config.json", cfg.to_json().encode())
    t_start = time.perf_counter()
    while state.step < cfg.iterations:
        si = state.rng.integers(0, len(source), cfg.batch)
        ti = state.rng.integers(0, len(target), cfg.batch)
        lr = onecycle_lr(state.step, cfg.iterations, cfg.lr)
        try:
            report = train_step(state, source.dense(si), source.labels[si], target.dense(ti))
        except TrainingAbort as exc:
            log.error("training aborted at step %d: %s", state.step, exc)
            if out is not None:
                from .io import atomic_write

                atomic_write(out / "abort.json", json.dumps({"step": state.step, "term": exc.term, "detail": str(exc)}).encode())
            raise
        log_lines.append(_log_record(state.step - 1, lr, report))
        if progress_every and state.step % progress_every == 0:
            log.info("step %d total %.4f (%.1fs)", state.step, report.total, time.perf_counter() - t_start)
        if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{state.step:06d}.ckpt", state.blocks(), cfg.to_dict())
    result = {"iterations": state.step, "seconds": time.perf_counter() - t_start}
    if target_val is not None:
        net = state.teacher.net if cfg.eval_with == "teacher" else state.student
        result["target_val"] = evaluate(net, target_val, cfg.num_classes, cfg.eval_batch)
    if out is not None:
        from .io import atomic_write

        atomic_write(out / "train.jsonl", ("\n".join(log_lines) + ("\n" if log_lines else "")).encode())
        save_checkpoint(out / "final.ckpt", state.blocks(), cfg.to_dict())
        atomic_write(out / "metrics.json", json.dumps(result, indent=2, sort_keys=True).encode())
    result["log"] = log_lines
    result["state"] = state
    return result


def run_adaptation(cfg: TrainConfig, progress_every: int = 0) -> dict:
    """Load synth directories named in ``cfg``, split the target, train and evaluate."""
    from .bench.dataset import load_sample_set, read_manifest, split_sequences

    for name in ("source_dir", "target_dir"):
        p = Path(getattr(cfg, name))
        if not getattr(cfg, name) or not (p / "manifest.json").exists():
            raise FileNotFoundError(f"{name}: no synth manifest under {p}")
    src_train, _ = split_sequences(read_manifest(cfg.source_dir)["sequences"], cfg.val_ratio)
    tgt_train, tgt_val = split_sequences(read_manifest(cfg.target_dir)["sequences"], cfg.val_ratio)
    kw = dict(bins=cfg.bins, duration=cfg.duration, jobs=cfg.jobs)
    source = load_sample_set(cfg.source_dir, src_train, **kw)
    target = load_sample_set(cfg.target_dir, tgt_train, labeled=False, **kw)
    target_val = load_sample_set(cfg.target_dir, tgt_val, **kw)
    result = train(cfg, source, target, target_val, cfg.out_dir, progress_every)
    result.pop("state")
    result.pop("log")
    return result
