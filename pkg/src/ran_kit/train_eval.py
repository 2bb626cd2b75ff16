"""Training loop, checkpoint files, and exact-match evaluation.

Training minimizes teacher-forced cross entropy with adadelta and
global-norm gradient clipping. Captions vary in length, so batches are
plain gradient accumulation over per-sample graphs; no padding or
masking. After every epoch the validation split is decoded with beam
search and the best-accuracy parameter snapshot is kept, with early
stopping on patience.

Checkpoints are a single binary file: magic, a JSON header carrying the
config (plus its fingerprint) and the vocabulary, then a named tensor
table of raw little-endian float32 data. Loading re-derives the
fingerprint from the embedded config, so a file whose header was edited
after saving is rejected as incompatible rather than silently trusted.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .caption_grammar import (
    Vocabulary,
    build_vocab,
    canonical,
    encode_caption,
    zero_shot_check,
)
from .glyph_synth import DatasetManifest, read_pgm
from .ran_model import (
    ModelConfig,
    beam_search,
    encode_image,
    forward_teacher_forced,
    init_params,
)
from .tensor_core import ShapeError, Tensor, backward, no_grad

CHECKPOINT_MAGIC = b"RANCKPT1"
CHECKPOINT_VERSION = 1
LOG_HEADER = "epoch\tmean_loss\tvalid_accuracy"
REPORT_HEADER = "sample_id\tprediction\treference\tcorrect"


class ZeroShotViolation(ValueError):
    """Validation or test captions use content the training set never shows."""


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss. Carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class IncompatibleCheckpoint(ValueError):
    """Well-formed checkpoint that this build refuses to use."""


class CorruptCheckpoint(ValueError):
    """Bytes that do not decode as a checkpoint."""


class EmptyManifest(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    image_size: int = 64
    batch_size: int = 16
    epochs: int = 200
    patience: int = 30
    seed: int = 0
    precision: str = "float32"
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float = 100.0
    beam: int = 10
    max_len: int = 40

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, "
                             f"got {self.precision!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.eps <= 0.0 or self.clip_norm <= 0.0:
            raise ValueError("eps and clip_norm must be positive")
        if self.beam < 1 or self.max_len < 1:
            raise ValueError("beam and max_len must be at least 1")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "image_size": self.image_size,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "patience": self.patience,
            "seed": self.seed,
            "precision": self.precision,
            "rho": self.rho,
            "eps": self.eps,
            "clip_norm": self.clip_norm,
            "beam": self.beam,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {
            "model", "image_size", "batch_size", "epochs", "patience",
            "seed", "precision", "rho", "eps", "clip_norm", "beam", "max_len",
        }
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config key {sorted(extra)[0]!r}")
        kwargs = {k: v for k, v in d.items() if k != "model"}
        return cls(model=ModelConfig.from_dict(d["model"]), **kwargs)

    def fingerprint(self) -> str:
        """First 16 hex digits of the sha256 of the canonical config JSON."""
        blob = json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AdadeltaState:
    """Zeiler accumulators plus the clipping bound.

    eg2 tracks the decayed mean of squared gradients, edx2 the decayed
    mean of squared applied updates, both keyed by parameter name.
    """

    eg2: dict
    edx2: dict
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float = 100.0

    @classmethod
    def fresh(cls, params: dict, rho: float = 0.95, eps: float = 1e-6,
              clip_norm: float = 100.0) -> "AdadeltaState":
        eg2 = {name: np.zeros_like(t.data) for name, t in params.items()}
        edx2 = {name: np.zeros_like(t.data) for name, t in params.items()}
        return cls(eg2=eg2, edx2=edx2, rho=rho, eps=eps, clip_norm=clip_norm)

    def copy(self) -> "AdadeltaState":
        return AdadeltaState(
            eg2={k: v.copy() for k, v in self.eg2.items()},
            edx2={k: v.copy() for k, v in self.edx2.items()},
            rho=self.rho, eps=self.eps, clip_norm=self.clip_norm,
        )


def adadelta_update(params: dict, grads: dict, state: AdadeltaState):
    """One in-place adadelta step over every parameter.

    Gradients are first jointly rescaled so their global L2 norm does
    not exceed state.clip_norm, then each parameter takes the Zeiler
    update: accumulate E[g^2], apply dx = -sqrt(E[dx^2]+eps) /
    sqrt(E[g^2]+eps) * g, accumulate E[dx^2].
    """
    for name, t in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter {name!r}")
        if np.shape(grads[name]) != t.data.shape:
            raise ShapeError(
                f"gradient shape {np.shape(grads[name])} does not match "
                f"parameter {name!r} shape {t.data.shape}"
            )
    sq = 0.0
    for name in params:
        g = np.asarray(grads[name], dtype=np.float64).ravel()
        sq += float(g @ g)
    norm = math.sqrt(sq)
    scale = state.clip_norm / norm if norm > state.clip_norm else 1.0
    rho, eps = state.rho, state.eps
    for name, t in params.items():
        g = np.asarray(grads[name], dtype=t.data.dtype)
        if scale != 1.0:
            g = g * t.data.dtype.type(scale)
        eg2 = state.eg2[name]
        eg2 *= rho
        eg2 += (1.0 - rho) * g * g
        dx = -np.sqrt(state.edx2[name] + eps) / np.sqrt(eg2 + eps) * g
        edx2 = state.edx2[name]
        edx2 *= rho
        edx2 += (1.0 - rho) * dx * dx
        t.data += dx
    return params, state


@dataclass
class Checkpoint:
    params: dict
    opt: Optional[AdadeltaState]
    config: TrainConfig
    vocab: Vocabulary


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded,
             struct.pack("<B", arr.ndim),
             struct.pack(f"<{arr.ndim}I", *arr.shape),
             np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    return b"".join(parts)


def save_checkpoint(params: dict, opt_state: Optional[AdadeltaState],
                    cfg: TrainConfig, vocab: Vocabulary, path) -> None:
    """Write a checkpoint file. Tensor data is stored as float32."""
    header = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": cfg.fingerprint(),
        "config": cfg.to_dict(),
        "vocab": list(vocab.index_to_token),
    }
    header_blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = [(name, params[name].data) for name in sorted(params)]
    if opt_state is not None:
        for name in sorted(opt_state.eg2):
            tensors.append((f"opt.eg2.{name}", opt_state.eg2[name]))
        for name in sorted(opt_state.edx2):
            tensors.append((f"opt.edx2.{name}", opt_state.edx2[name]))
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(header_blob)),
              header_blob, struct.pack("<I", len(tensors))]
    chunks.extend(_pack_tensor(name, arr) for name, arr in tensors)
    Path(path).write_bytes(b"".join(chunks))


class _Cursor:
    def __init__(self, raw: bytes, origin: str):
        self.raw = raw
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpoint(f"{self.origin}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    cur = _Cursor(raw, str(path))
    if cur.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic, not a checkpoint file")
    header_blob = cur.take(cur.u32())
    try:
        header = json.loads(header_blob.decode("utf-8"))
        version = header["version"]
        stored_print = header["fingerprint"]
        config_dict = header["config"]
        vocab_tokens = header["vocab"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from exc
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(
            f"{path}: version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    try:
        cfg = TrainConfig.from_dict(config_dict)
        vocab = Vocabulary(vocab_tokens)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: bad header contents ({exc})") from exc
    if cfg.fingerprint() != stored_print:
        raise IncompatibleCheckpoint(
            f"{path}: config fingerprint mismatch "
            f"(header says {stored_print}, config hashes to {cfg.fingerprint()})"
        )
    if vocab.size != cfg.model.vocab_size:
        raise CorruptCheckpoint(
            f"{path}: vocabulary has {vocab.size} tokens but the config "
            f"says {cfg.model.vocab_size}"
        )
    count = cur.u32()
    tensors = {}
    for _ in range(count):
        name = cur.take(cur.u16()).decode("utf-8")
        rank = cur.u8()
        dims = struct.unpack(f"<{rank}I", cur.take(4 * rank))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(cur.take(4 * n_values), dtype="<f4")
        if name in tensors:
            raise CorruptCheckpoint(f"{path}: duplicate tensor {name!r}")
        tensors[name] = data.reshape(dims).astype(np.float32)
    if cur.pos != len(raw):
        raise CorruptCheckpoint(
            f"{path}: {len(raw) - cur.pos} trailing bytes after tensor table"
        )
    params = {}
    eg2 = {}
    edx2 = {}
    for name, arr in tensors.items():
        if name.startswith("opt.eg2."):
            eg2[name[len("opt.eg2."):]] = arr
        elif name.startswith("opt.edx2."):
            edx2[name[len("opt.edx2."):]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    if not params:
        raise CorruptCheckpoint(f"{path}: no parameter tensors")
    opt = None
    if eg2 or edx2:
        if set(eg2) != set(params) or set(edx2) != set(params):
            raise CorruptCheckpoint(
                f"{path}: optimizer tensors do not cover the parameters"
            )
        opt = AdadeltaState(eg2=eg2, edx2=edx2, rho=cfg.rho, eps=cfg.eps,
                            clip_norm=cfg.clip_norm)
    return Checkpoint(params=params, opt=opt, config=cfg, vocab=vocab)


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    prediction: str
    reference: str
    correct: bool


@dataclass(frozen=True)
class EvalReport:
    total: int
    exact_match: int
    records: tuple = field(default_factory=tuple)

    @property
    def accuracy(self) -> float:
        return self.exact_match / self.total

    def save(self, path) -> None:
        lines = [REPORT_HEADER]
        for r in self.records:
            lines.append(
                f"{r.sample_id}\t{r.prediction}\t{r.reference}"
                f"\t{1 if r.correct else 0}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_image(data_root, rel_path):
    return read_pgm(Path(data_root) / rel_path)


def evaluate(manifest: DatasetManifest, checkpoint: Checkpoint,
             beam: int = 10, data_root=".", report_path=None) -> EvalReport:
    """Beam-decode every sample; exact canonical-caption match counts.

    A sample whose image cannot be read or decoded is recorded with the
    error name in the prediction column and counted incorrect.
    """
    if len(manifest) == 0:
        raise EmptyManifest(f"manifest for split {manifest.split!r} is empty")
    cfg = checkpoint.config
    records = []
    for item in manifest.items:
        reference = canonical(item.caption)
        try:
            img = _load_image(data_root, item.image_path)
            with no_grad():
                grid = encode_image(img, cfg.model.encoder, checkpoint.params)
            result = beam_search(grid, checkpoint.params, cfg.model,
                                 checkpoint.vocab, beam=beam,
                                 max_len=cfg.max_len)
            prediction = result.caption
        except (OSError, ValueError) as exc:
            prediction = f"<error:{type(exc).__name__}>"
        records.append(EvalRecord(
            sample_id=item.sample_id,
            prediction=prediction,
            reference=reference,
            correct=prediction == reference,
        ))
    report = EvalReport(
        total=len(records),
        exact_match=sum(r.correct for r in records),
        records=tuple(records),
    )
    if report_path is not None:
        report.save(report_path)
    return report


def _snapshot(params: dict, opt: AdadeltaState):
    frozen = {name: Tensor(t.data.copy(), requires_grad=True)
              for name, t in params.items()}
    return frozen, opt.copy()


def _shuffle_rng(seed: int):
    digest = hashlib.sha256(f"shuffle|{seed}".encode("ascii")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def train(train_manifest: DatasetManifest, valid_manifest: DatasetManifest,
          cfg: TrainConfig, data_root=".", log_path=None) -> Checkpoint:
    """Fit the model and return the best-validation-accuracy checkpoint.

    The log (written to log_path when given) gets one TSV row per epoch:
    epoch number, mean per-token cross entropy over the training set,
    and validation exact-match accuracy. Epoch 0 is measured before any
    update so the first row shows untrained calibration, roughly ln K
    per token.
    """
    if len(train_manifest) == 0:
        raise EmptyManifest("training manifest is empty")
    if len(valid_manifest) == 0:
        raise EmptyManifest("validation manifest is empty")
    coverage = zero_shot_check(train_manifest.captions(),
                               valid_manifest.captions())
    if not coverage.ok:
        raise ZeroShotViolation(
            "validation captions use content absent from training: "
            + ", ".join(sorted(coverage.missing_tokens))
        )
    vocab = build_vocab(train_manifest.captions() + valid_manifest.captions())
    if vocab.size != cfg.model.vocab_size:
        raise ValueError(
            f"config says vocab_size={cfg.model.vocab_size} but the corpus "
            f"vocabulary has {vocab.size} tokens"
        )

    dtype = cfg.dtype
    params = init_params(cfg.model, seed=cfg.seed, dtype=dtype)
    opt = AdadeltaState.fresh(params, rho=cfg.rho, eps=cfg.eps,
                              clip_norm=cfg.clip_norm)

    def load_pixels(item):
        img = _load_image(data_root, item.image_path)
        want = (cfg.image_size, cfg.image_size)
        if img.pixels.shape != want:
            raise ValueError(
                f"sample {item.sample_id!r}: image is {img.pixels.shape}, "
                f"config expects {want}"
            )
        return img.pixels.astype(dtype)

    train_set = [(load_pixels(item), encode_caption(item.caption, vocab))
                 for item in train_manifest.items]
    valid_set = [(load_pixels(item), canonical(item.caption))
                 for item in valid_manifest.items]

    def mean_token_loss() -> float:
        total = 0.0
        tokens = 0
        with no_grad():
            for pixels, target in train_set:
                loss, _ = forward_teacher_forced(pixels, target,
                                                 cfg.model, params)
                total += float(loss.data)
                tokens += len(target) - 1
        return total / tokens

    def valid_accuracy() -> float:
        hits = 0
        for pixels, reference in valid_set:
            with no_grad():
                grid = encode_image(pixels, cfg.model.encoder, params)
            result = beam_search(grid, params, cfg.model, vocab,
                                 beam=cfg.beam, max_len=cfg.max_len)
            hits += result.caption == reference
        return hits / len(valid_set)

    rows = []

    def log_row(epoch, loss, accuracy):
        rows.append((epoch, loss, accuracy))
        if log_path is not None:
            lines = [LOG_HEADER]
            lines.extend(f"{e}\t{l!r}\t{a!r}" for e, l, a in rows)
            Path(log_path).write_text("\n".join(lines) + "\n",
                                      encoding="utf-8")

    log_row(0, mean_token_loss(), valid_accuracy())
    best_params, best_opt = _snapshot(params, opt)
    best_accuracy = rows[0][2]
    stale = 0
    rng = _shuffle_rng(cfg.seed)
    diverged = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_total = 0.0
        epoch_tokens = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad_sum = {name: np.zeros_like(t.data)
                        for name, t in params.items()}
            for idx in batch:
                pixels, target = train_set[idx]
                loss, _ = forward_teacher_forced(pixels, target,
                                                 cfg.model, params)
                value = float(loss.data)
                if not math.isfinite(value):
                    diverged = f"non-finite loss in epoch {epoch}"
                    break
                grads = backward(loss)
                for name, t in params.items():
                    grad_sum[name] += grads[t]
                epoch_total += value
                epoch_tokens += len(target) - 1
            if diverged:
                break
            inv = 1.0 / len(batch)
            for name in grad_sum:
                grad_sum[name] *= inv
            adadelta_update(params, grad_sum, opt)
        if diverged:
            break
        mean_loss = epoch_total / epoch_tokens
        accuracy = valid_accuracy()
        log_row(epoch, mean_loss, accuracy)
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_params, best_opt = _snapshot(params, opt)
            stale = 0
        else:
            stale += 1
        if best_accuracy >= 1.0 or stale >= cfg.patience:
            break

    best = Checkpoint(params=best_params, opt=best_opt, config=cfg,
                      vocab=vocab)
    if diverged:
        raise DivergenceError(diverged, checkpoint=best)
    return best
