"""Training loop, evaluation, score fusion, and the alpha ablation harness.

Determinism contract: every stochastic choice is seeded from the run seed via
derive_seed(seed, purpose, ...), so identical (config, seed) runs produce
byte-identical metric logs, and a run resumed from its last checkpoint
finishes exactly like an uninterrupted one. Floats are logged with repr() so
log equality is bit equality.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import (FusionConfig, ObjectiveConfig, OptimizerConfig, RunConfig,
                     config_hash, dump_run_config, run_config_from_dict,
                     run_config_to_dict)
from .embeddings import (build_label_matrix, load_embedding_table,
                         make_synthetic_table, vocab_tokens)
from .heatmaps import build_volume, channel_count
from .network import (MicroGestureNet, apply_checkpoint, init_params,
                      load_checkpoint, model_from_checkpoint, predict_scores,
                      save_checkpoint)
from .objective import LossBreakdown, total_loss
from .pose_io import DatasetManifest, LabelVocabulary, ValidationError

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.csv"
EPOCH_LOG_NAME = "epochs.csv"
LAST_CHECKPOINT = "last.ckpt.npz"
BEST_CHECKPOINT = "best.ckpt.npz"

TRAIN_LOG_HEADER = "step,lr,class_loss,emb_loss,total"
EPOCH_LOG_HEADER = "epoch,lr,train_loss,train_top1,val_top1"

_SCORE_MAGIC = b"MGSC"
_SCORE_VERSION = 1
_SCORE_HEADER = struct.Struct("<3I")  # version, M, N


class EngineError(RuntimeError):
    """Runtime failure inside training/evaluation (exit code 2 territory)."""


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of values (run seed, purpose, ...)."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.blake2s(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def cosine_lr(epoch: int, opt: OptimizerConfig) -> float:
    """base_lr * (1 + cos(pi * epoch/epochs)) / 2, floored at 0."""
    if not 0 <= epoch <= opt.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {opt.epochs}]")
    return max(0.0, opt.base_lr * (1.0 + math.cos(math.pi * (epoch / opt.epochs))) / 2.0)


def label_embedding_matrix(vocab: LabelVocabulary, objective: ObjectiveConfig,
                           seed: int) -> np.ndarray:
    """(n_classes, dim) label embedding matrix from the configured source."""
    if objective.embeddings == "synthetic":
        table = make_synthetic_table(vocab_tokens(vocab), dim=objective.embedding_dim,
                                     seed=derive_seed(seed, "embeddings"))
    else:
        table = load_embedding_table(objective.embeddings, dim=objective.embedding_dim)
    return build_label_matrix(vocab, table)


def vocab_checksum(vocab: LabelVocabulary) -> bytes:
    return hashlib.sha256("\n".join(vocab.labels).encode("utf-8")).digest()


# ---------------------------------------------------------------------------
# Volume batching
# ---------------------------------------------------------------------------

def _stack_volumes(clips, layout, vcfg, mode: str, seed_for) -> np.ndarray:
    vols = [np.asarray(build_volume(c, layout, vcfg, mode=mode, seed=seed_for(c)).data)
            for c in clips]
    return np.stack(vols).astype(np.float32, copy=False)


def test_volumes(clips, layout, vcfg) -> np.ndarray:
    """Deterministic single-clip volumes (midpoint temporal sampling)."""
    return _stack_volumes(clips, layout, vcfg, "test", lambda c: None)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def make_optimizer(model: MicroGestureNet, opt: OptimizerConfig) -> torch.optim.SGD:
    """SGD with momentum: v <- m*v + g + wd*theta; theta <- theta - lr*v."""
    return torch.optim.SGD(model.parameters(), lr=opt.base_lr,
                           momentum=opt.momentum, weight_decay=opt.weight_decay)


def train_step(model: MicroGestureNet, optimizer: torch.optim.SGD,
               volumes: torch.Tensor, labels: torch.Tensor,
               e_matrix: torch.Tensor, alpha: float, reduction: str = "sum",
               step: int = 0) -> LossBreakdown:
    """One SGD update; aborts with diagnostics on a non-finite loss."""
    optimizer.zero_grad(set_to_none=True)
    out = model(volumes)
    loss, breakdown = total_loss(out.logits, labels, out.z_emb, e_matrix,
                                 alpha=alpha, reduction=reduction)
    if not math.isfinite(breakdown.total):
        lr = optimizer.param_groups[0]["lr"]
        raise EngineError(
            f"non-finite loss at step {step}: lr={lr!r} "
            f"class_loss={breakdown.class_loss!r} emb_loss={breakdown.emb_loss!r}")
    loss.backward()
    optimizer.step()
    return breakdown


def _momentum_arrays(model: MicroGestureNet, optimizer: torch.optim.SGD) -> dict:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if state and state.get("momentum_buffer") is not None:
            out[name] = state["momentum_buffer"]
    return out


def _restore_momentum(model: MicroGestureNet, optimizer: torch.optim.SGD,
                      momentum: dict) -> None:
    params = dict(model.named_parameters())
    for name, arr in momentum.items():
        p = params.get(name)
        if p is None:
            raise EngineError(f"checkpoint momentum for unknown parameter {name!r}")
        optimizer.state[p]["momentum_buffer"] = (
            torch.from_numpy(np.ascontiguousarray(arr)).to(p.dtype))


# ---------------------------------------------------------------------------
# Evaluation primitives
# ---------------------------------------------------------------------------

def forward_logits(model: MicroGestureNet, volumes: np.ndarray,
                   batch_size: int = 32) -> np.ndarray:
    """Inference-mode logits for a (M,C,T,H,W) volume stack."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, volumes.shape[0], batch_size):
            batch = torch.from_numpy(volumes[start:start + batch_size])
            chunks.append(model(batch).logits.numpy())
    return np.concatenate(chunks, axis=0)


def score_matrix(model: MicroGestureNet, volumes: np.ndarray,
                 batch_size: int = 32, score_space: str = "softmax") -> np.ndarray:
    logits = forward_logits(model, volumes, batch_size)
    if score_space == "softmax":
        return predict_scores(logits)
    return logits.astype(np.float64)


def topk_accuracy(scores, labels, k: int) -> float:
    """Fraction of rows whose true label ranks in the top k.

    Ties are broken toward the lower class index: the true label's rank is
    the number of scores strictly greater than its own, plus the number of
    equal scores at lower indices.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2:
        raise ValidationError(f"scores must be (M, N), got shape {scores.shape}")
    m, n = scores.shape
    if labels.shape != (m,):
        raise ValidationError(f"labels shape {labels.shape} does not match {m} score rows")
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    if m == 0:
        raise ValidationError("empty score matrix")
    if labels.min() < 0 or labels.max() >= n:
        raise ValidationError(f"label out of range for {n} classes")
    true = scores[np.arange(m), labels]
    greater = (scores > true[:, None]).sum(axis=1)
    ties_before = ((scores == true[:, None]) & (np.arange(n)[None, :] < labels[:, None])).sum(axis=1)
    return float(((greater + ties_before) < k).mean())


@dataclass(frozen=True)
class EvalReport:
    """Top-k metrics plus per-class accuracy and confusion counts."""

    top1: float
    top5: float
    per_class: tuple[float, ...]
    confusion: np.ndarray
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "top5": self.top5,
            "per_class": list(self.per_class),
            "confusion": self.confusion.tolist(),
            "n_samples": self.n_samples,
        }


def score_report(scores, labels, n_classes: int) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    top1 = topk_accuracy(scores, labels, 1)
    top5 = topk_accuracy(scores, labels, min(5, n_classes))
    preds = np.argmax(scores, axis=1)  # lowest index wins ties, matching the rank rule
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    counts = confusion.sum(axis=1)
    correct = np.diag(confusion)
    per_class = tuple(float(correct[c] / counts[c]) if counts[c] else 0.0
                      for c in range(n_classes))
    return EvalReport(top1=top1, top5=top5, per_class=per_class,
                      confusion=confusion, n_samples=int(labels.shape[0]))


def format_report(report: EvalReport, vocab: LabelVocabulary | None = None) -> str:
    lines = [f"samples {report.n_samples}",
             f"top1 {report.top1!r}",
             f"top5 {report.top5!r}",
             "per-class accuracy:"]
    for c, acc in enumerate(report.per_class):
        name = vocab.labels[c] if vocab is not None else f"class {c}"
        count = int(report.confusion[c].sum())
        lines.append(f"  {c:3d} {name:<28s} {acc!r} ({count} samples)")
    return "\n".join(lines) + "\n"


def fuse_scores(scores_joint, scores_limb, fusion: FusionConfig) -> np.ndarray:
    """Elementwise weighted sum of two modality score matrices."""
    a = np.asarray(scores_joint, dtype=np.float64)
    b = np.asarray(scores_limb, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"score shape mismatch: {a.shape} vs {b.shape}")
    return fusion.weight_joint * a + fusion.weight_limb * b


# ---------------------------------------------------------------------------
# Score files
# ---------------------------------------------------------------------------

def write_scores(path, scores, labels, vocab_digest: bytes) -> None:
    """Binary score file: MGSC magic, version/M/N, vocab sha256, labels, scores.

    Scores are little-endian float32 row-major, labels little-endian uint32;
    labels ride along so fusion reports can be computed from score files alone.
    """
    scores = np.ascontiguousarray(np.asarray(scores), dtype="<f4")
    labels = np.ascontiguousarray(np.asarray(labels), dtype="<u4")
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ValidationError(f"bad score/label shapes {scores.shape} / {labels.shape}")
    if len(vocab_digest) != 32:
        raise ValidationError("vocab digest must be 32 bytes (sha256)")
    with open(path, "wb") as fh:
        fh.write(_SCORE_MAGIC)
        fh.write(_SCORE_HEADER.pack(_SCORE_VERSION, scores.shape[0], scores.shape[1]))
        fh.write(vocab_digest)
        fh.write(labels.tobytes())
        fh.write(scores.tobytes())


def read_scores(path) -> tuple[np.ndarray, np.ndarray, bytes]:
    """Inverse of write_scores; returns (scores (M,N) f32, labels (M,), digest)."""
    blob = Path(path).read_bytes()
    head_len = len(_SCORE_MAGIC) + _SCORE_HEADER.size + 32
    if len(blob) < head_len or blob[:4] != _SCORE_MAGIC:
        raise ValidationError(f"{path}: not a score file")
    version, m, n = _SCORE_HEADER.unpack_from(blob, 4)
    if version != _SCORE_VERSION:
        raise ValidationError(f"{path}: unsupported score file version {version}")
    digest = blob[4 + _SCORE_HEADER.size:head_len]
    expect = head_len + 4 * m + 4 * m * n
    if len(blob) != expect:
        raise ValidationError(f"{path}: truncated score file ({len(blob)} bytes, expected {expect})")
    labels = np.frombuffer(blob, dtype="<u4", count=m, offset=head_len).astype(np.int64)
    scores = np.frombuffer(blob, dtype="<f4", count=m * n, offset=head_len + 4 * m)
    if m and labels.max() >= n:
        raise ValidationError(f"{path}: label out of range for {n} classes")
    return scores.reshape(m, n).copy(), labels, digest


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    epochs_run: int
    global_step: int
    final_train_top1: float
    final_val_top1: float
    best_val_top1: float
    last_checkpoint: Path
    best_checkpoint: Path | None


def _fmt(x: float) -> str:
    return repr(float(x))


def train(manifest: DatasetManifest, cfg: RunConfig, out_dir,
          resume: bool = False, stop_after: int | None = None) -> TrainResult:
    """Full training run; writes logs, checkpoints, and a frozen config copy.

    stop_after stops after that many epochs have completed in THIS process
    (used to exercise resume); resume continues from last.ckpt.npz and
    requires an identical config hash.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = out_dir / "config.yaml"
    if not cfg_path.exists():
        dump_run_config(cfg, cfg_path)

    data_cfg, opt = cfg.data, cfg.optimizer
    train_clips = manifest.clips_for(data_cfg.train_split)
    if not train_clips:
        raise ValidationError(f"train split {data_cfg.train_split!r} is empty")
    val_clips = manifest.clips_for(data_cfg.val_split)
    layout, vocab = manifest.layout, manifest.vocab

    in_channels = channel_count(layout, cfg.volume.modality)
    net_cfg = cfg.network.resolve(in_channels, vocab.n)
    e_matrix = torch.from_numpy(
        label_embedding_matrix(vocab, cfg.objective, cfg.seed).astype(np.float32))

    model = init_params(net_cfg, derive_seed(cfg.seed, "init"))
    optimizer = make_optimizer(model, opt)
    chash = config_hash(cfg)

    last_path = out_dir / LAST_CHECKPOINT
    best_path = out_dir / BEST_CHECKPOINT
    start_epoch, global_step = 0, 0
    best_val, best_epoch = -math.inf, -1
    final_train_top1 = final_val_top1 = math.nan

    if resume:
        if not last_path.exists():
            raise EngineError(f"cannot resume: {last_path} does not exist")
        ckpt = load_checkpoint(last_path)
        if ckpt.meta.get("config_hash") != chash:
            raise EngineError(
                f"resume config mismatch: checkpoint hash {ckpt.meta.get('config_hash')!r} "
                f"!= current {chash!r}")
        apply_checkpoint(model, ckpt)
        _restore_momentum(model, optimizer, ckpt.momentum)
        start_epoch = int(ckpt.meta["epoch"]) + 1
        global_step = int(ckpt.meta["global_step"])
        best_val = float(ckpt.meta["best_val_top1"])
        best_epoch = int(ckpt.meta["best_epoch"])
        final_train_top1 = float(ckpt.meta["train_top1"])
        final_val_top1 = float(ckpt.meta["val_top1"])
        logger.info("resuming %s at epoch %d", out_dir, start_epoch)

    train_eval_vols = test_volumes(train_clips, layout, cfg.volume)
    train_labels = np.array([c.label_id for c in train_clips], dtype=np.int64)
    val_vols = test_volumes(val_clips, layout, cfg.volume) if val_clips else None
    val_labels = np.array([c.label_id for c in val_clips], dtype=np.int64)

    mode = "a" if resume else "w"
    with open(out_dir / TRAIN_LOG_NAME, mode, encoding="utf-8") as step_log, \
            open(out_dir / EPOCH_LOG_NAME, mode, encoding="utf-8") as epoch_log:
        if not resume:
            print(TRAIN_LOG_HEADER, file=step_log)
            print(EPOCH_LOG_HEADER, file=epoch_log)

        epochs_done = start_epoch
        for epoch in range(start_epoch, opt.epochs):
            lr = cosine_lr(epoch, opt)
            for group in optimizer.param_groups:
                group["lr"] = lr

            order = np.random.default_rng(
                derive_seed(cfg.seed, "shuffle", epoch)).permutation(len(train_clips))
            model.train()
            totals = []
            for start in range(0, len(order), opt.batch_size):
                batch_clips = [train_clips[i] for i in order[start:start + opt.batch_size]]
                vols = _stack_volumes(
                    batch_clips, layout, cfg.volume, "train",
                    lambda c: derive_seed(cfg.seed, "sample", epoch, c.clip_id))
                labels = torch.tensor([c.label_id for c in batch_clips], dtype=torch.long)
                breakdown = train_step(model, optimizer, torch.from_numpy(vols), labels,
                                       e_matrix, cfg.objective.alpha,
                                       cfg.objective.emb_loss_reduction, step=global_step)
                print(f"{global_step},{_fmt(lr)},{_fmt(breakdown.class_loss)},"
                      f"{_fmt(breakdown.emb_loss)},{_fmt(breakdown.total)}", file=step_log)
                totals.append(breakdown.total)
                global_step += 1

            train_loss = float(np.mean(np.asarray(totals, dtype=np.float64)))
            train_scores = score_matrix(model, train_eval_vols, opt.batch_size,
                                        cfg.fusion.score_space)
            final_train_top1 = topk_accuracy(train_scores, train_labels, 1)
            if val_vols is not None:
                val_scores = score_matrix(model, val_vols, opt.batch_size,
                                          cfg.fusion.score_space)
                final_val_top1 = topk_accuracy(val_scores, val_labels, 1)
            else:
                final_val_top1 = math.nan
            print(f"{epoch},{_fmt(lr)},{_fmt(train_loss)},{_fmt(final_train_top1)},"
                  f"{_fmt(final_val_top1)}", file=epoch_log)
            step_log.flush()
            epoch_log.flush()

            if final_val_top1 > best_val:
                best_val, best_epoch = final_val_top1, epoch
            meta = {
                "epoch": epoch,
                "global_step": global_step,
                "seed": cfg.seed,
                "config_hash": chash,
                "best_val_top1": best_val,
                "best_epoch": best_epoch,
                "train_top1": final_train_top1,
                "val_top1": final_val_top1,
            }
            momentum = _momentum_arrays(model, optimizer)
            save_checkpoint(last_path, model, momentum=momentum, meta=meta)
            if best_epoch == epoch and not math.isnan(final_val_top1):
                save_checkpoint(best_path, model, momentum=momentum, meta=meta)

            epochs_done = epoch + 1
            if (opt.early_stop_train_top1 is not None
                    and final_train_top1 >= opt.early_stop_train_top1):
                logger.info("early stop at epoch %d: train top1 %.4f", epoch, final_train_top1)
                break
            if stop_after is not None and epochs_done - start_epoch >= stop_after:
                break

    return TrainResult(
        out_dir=out_dir,
        epochs_run=epochs_done,
        global_step=global_step,
        final_train_top1=final_train_top1,
        final_val_top1=final_val_top1,
        best_val_top1=best_val,
        last_checkpoint=last_path,
        best_checkpoint=best_path if best_path.exists() else None,
    )


# ---------------------------------------------------------------------------
# Evaluation entry point
# ---------------------------------------------------------------------------

def evaluate(manifest: DatasetManifest, cfg: RunConfig, checkpoint_path, split: str,
             score_path=None, report_path=None) -> tuple[EvalReport, np.ndarray, np.ndarray]:
    """Score one split with a trained checkpoint; optionally write artifacts."""
    clips = manifest.clips_for(split)
    if not clips:
        raise ValidationError(f"split {split!r} is empty")
    ckpt = load_checkpoint(checkpoint_path)
    model = model_from_checkpoint(ckpt)
    in_channels = channel_count(manifest.layout, cfg.volume.modality)
    if model.config.in_channels != in_channels:
        raise ValidationError(
            f"checkpoint expects {model.config.in_channels} input channels, "
            f"volume settings produce {in_channels}")
    if model.config.n_classes != manifest.vocab.n:
        raise ValidationError(
            f"checkpoint has {model.config.n_classes} classes, manifest has {manifest.vocab.n}")

    vols = test_volumes(clips, manifest.layout, cfg.volume)
    labels = np.array([c.label_id for c in clips], dtype=np.int64)
    scores = score_matrix(model, vols, cfg.optimizer.batch_size, cfg.fusion.score_space)
    report = score_report(scores, labels, manifest.vocab.n)
    if score_path is not None:
        write_scores(score_path, scores, labels, vocab_checksum(manifest.vocab))
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return report, scores, labels


def fused_report(joint_path, limb_path, fusion: FusionConfig) -> tuple[EvalReport, np.ndarray]:
    """Load two score files, fuse them, and compute metrics from stored labels."""
    scores_j, labels_j, digest_j = read_scores(joint_path)
    scores_l, labels_l, digest_l = read_scores(limb_path)
    if scores_j.shape != scores_l.shape:
        raise ValidationError(
            f"score shape mismatch: {scores_j.shape} vs {scores_l.shape}")
    if digest_j != digest_l:
        raise ValidationError("score files come from different label vocabularies")
    if not np.array_equal(labels_j, labels_l):
        raise ValidationError("score files disagree on sample labels")
    fused = fuse_scores(scores_j, scores_l, fusion)
    return score_report(fused, labels_j, fused.shape[1]), fused


# ---------------------------------------------------------------------------
# Alpha ablation harness
# ---------------------------------------------------------------------------

def ablate_alpha(manifest: DatasetManifest, cfg: RunConfig, alphas, out_root) -> list[dict]:
    """One full train+eval per alpha, shared seeds; returns rows of metrics."""
    alphas = list(alphas)
    if not alphas:
        raise ValidationError("need at least one alpha")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, alpha in enumerate(alphas):
        data = run_config_to_dict(cfg)
        data["objective"]["alpha"] = float(alpha)
        sub_cfg = run_config_from_dict(data)
        run_dir = out_root / f"alpha_{idx:02d}"
        result = train(manifest, sub_cfg, run_dir)
        report, _, _ = evaluate(manifest, sub_cfg, result.last_checkpoint,
                                sub_cfg.data.test_split,
                                score_path=run_dir / "test.scores",
                                report_path=run_dir / "report.json")
        rows.append({"alpha": float(alpha), "top1": report.top1, "top5": report.top5})
        logger.info("alpha %g: top1 %.4f top5 %.4f", alpha, report.top1, report.top5)
    with open(out_root / "ablation.csv", "w", encoding="utf-8") as fh:
        print("alpha,top1,top5", file=fh)
        for row in rows:
            print(f"{_fmt(row['alpha'])},{_fmt(row['top1'])},{_fmt(row['top5'])}", file=fh)
    (out_root / "ablation.txt").write_text(format_ablation_table(rows), encoding="utf-8")
    return rows


def format_ablation_table(rows) -> str:
    lines = [f"{'alpha':>8s} {'top1':>10s} {'top5':>10s}"]
    for row in rows:
        lines.append(f"{row['alpha']:>8g} {row['top1']:>10.4f} {row['top5']:>10.4f}")
    return "\n".join(lines) + "\n"
