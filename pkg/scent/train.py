"""
Multi-task loss, batch collation, Adam, learning-rate schedule and the
teacher-forced training loop.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from acoustics.features import Manifest

from .align import dtw, warp_to_target
from .checkpoints import Checkpoint, decode_checkpoint, load_checkpoint, save_checkpoint
from .exceptions import ConfigError, DataError, DegenerateAlignmentError, NonFiniteError
from .metrics import mel_cepstra
from .model import (
    FeatureStats, ForwardOutput, MaskSource, ModelConfig, ScentModel, gmm_nll, gmm_partition, model_inputs,
)
from .numerics import Node, ParamStore, Tape


logger = logging.getLogger('scent.train')

PRECISIONS = {'float64': np.float64, 'float32': np.float32}
LOG_COLUMNS = ('step', 'epoch', 'lr', 'total', 'dec', 'post', 'end', 'l2', 'grad_norm', 'skipped')
DTW_CEPSTRA = 25


@dataclass
class LossWeights:
    w_dec: float = 1.0
    w_post: float = 1.0
    w_end: float = 0.005

    @classmethod
    def for_mode(cls, output_mode: str, w_dec: Optional[float] = None, w_post: float = 1.0,
                 w_end: float = 0.005) -> 'LossWeights':
        """Default ``w_dec`` is 1.0 for MSE and 0.01 for the mixture likelihood."""
        if w_dec is None:
            w_dec = 0.01 if output_mode == 'gmm' else 1.0
        return cls(w_dec, w_post, w_end).validate()

    def validate(self) -> 'LossWeights':
        if min(self.w_dec, self.w_post, self.w_end) < 0:
            raise ConfigError("Loss weights must be nonnegative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.95
    decay_start: int = 50
    l2: float = 1e-6
    batch: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    epochs: int = 100
    precision: str = 'float64'

    def validate(self) -> 'TrainConfig':
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if self.batch < 1 or self.epochs < 0 or self.decay_start < 0:
            raise ConfigError("batch must be positive, epochs and decay_start nonnegative")
        if self.l2 < 0 or self.clip_norm <= 0:
            raise ConfigError("l2 must be nonnegative and clip_norm positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam moments must lie in [0, 1) with a positive eps")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        return self

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)


def end_labels(n_steps: int) -> np.ndarray:
    """Completion labels: only the last decoder step is 1."""
    if n_steps < 1:
        raise DataError("A target needs at least one decoder step")
    labels = np.zeros(n_steps)
    labels[-1] = 1.0
    return labels


def lr_schedule(epoch: int, cfg: Optional[TrainConfig] = None) -> float:
    """Constant through ``decay_start``, then exponential decay per epoch."""
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if epoch <= cfg.decay_start:
        return cfg.lr
    return cfg.lr * cfg.decay ** (epoch - cfg.decay_start)


@dataclass
class TrainingPair:
    id: str
    x: np.ndarray
    y: np.ndarray


def prepare_pairs(manifest: Manifest, split: str, cfg: ModelConfig) -> List[TrainingPair]:
    """
    Raw (input, target) arrays of a split.

    Without attention, inputs are DTW-warped onto the target timeline using
    mel-cepstra distances so the pair is frame aligned.
    """
    pairs = []
    for source, target in manifest.pairs(split):
        mel = manifest.load(source, 'mel')
        aux = manifest.load(source, 'aux') if cfg.input_features != 'mel' else None
        x = model_inputs(mel, aux, cfg)
        y = manifest.load(target, 'mel').astype(np.float64)
        if y.shape[1] != cfg.d_mel:
            raise DataError(f"'{target.id}' has {y.shape[1]} mel bands, the model expects {cfg.d_mel}")
        if not cfg.use_attention:
            n_coeffs = min(DTW_CEPSTRA, cfg.d_mel)
            path = dtw(mel_cepstra(mel, n_coeffs)[:, 1:], mel_cepstra(y, n_coeffs)[:, 1:])
            x = warp_to_target(x, path, y.shape[0])
        pairs.append(TrainingPair(source.id, x, y))
    if not pairs:
        raise DataError(f"Split '{split}' is empty")
    return pairs


def feature_stats(pairs: Sequence[TrainingPair]) -> FeatureStats:
    return FeatureStats.from_sequences([pair.x for pair in pairs], [pair.y for pair in pairs])


@dataclass
class Batch:
    x: np.ndarray
    x_lengths: np.ndarray
    y: np.ndarray
    frame_mask: np.ndarray
    step_mask: np.ndarray
    end_labels: np.ndarray
    ids: List[str]

    @property
    def size(self) -> int:
        return int(self.x.shape[0])


def collate(pairs: Sequence[TrainingPair], cfg: ModelConfig, stats: Optional[FeatureStats] = None,
            pad_steps: int = 0) -> Batch:
    """
    Pad normalized pairs to the batch maximum.

    Targets are padded to whole decoder steps by repeating their last frame;
    ``pad_steps`` appends further fully masked steps.
    """
    if not pairs:
        raise DataError("Cannot collate an empty batch")
    stats = stats or FeatureStats.identity(cfg)
    r = cfg.r
    x_lengths = np.array([pair.x.shape[0] for pair in pairs], dtype=np.int64)
    y_lengths = np.array([pair.y.shape[0] for pair in pairs], dtype=np.int64)
    step_counts = -(-y_lengths // r)
    steps = int(step_counts.max()) + pad_steps
    batch = len(pairs)

    x = np.zeros((batch, int(x_lengths.max()), cfg.d_in))
    y = np.zeros((batch, steps * r, cfg.d_mel))
    frame_mask = np.zeros((batch, steps * r))
    step_mask = np.zeros((batch, steps))
    labels = np.zeros((batch, steps))
    for b, pair in enumerate(pairs):
        x[b, :x_lengths[b]] = stats.normalize_input(pair.x)
        target = stats.normalize_target(pair.y)
        y[b, :y_lengths[b]] = target
        y[b, y_lengths[b]:] = target[-1]
        frame_mask[b, :y_lengths[b]] = 1.0
        step_mask[b, :step_counts[b]] = 1.0
        labels[b, :step_counts[b]] = end_labels(int(step_counts[b]))
    return Batch(x, x_lengths, y, frame_mask, step_mask, labels, [pair.id for pair in pairs])


def _masked_mean(tape: Tape, values: Node, mask: np.ndarray, count: float) -> Node:
    return tape.sum(values * mask) / count


def total_loss(tape: Tape, output: ForwardOutput, batch: Batch, weights: LossWeights,
               cfg: ModelConfig) -> Dict[str, Node]:
    """
    Weighted sum of decoder, PostNet and completion losses over valid positions.

    The decoder term is a mean squared error per valid frame value (MSE mode)
    or the mean mixture negative log-likelihood per valid step, counting only
    the valid frames of each step (GMM mode); the PostNet term is always a
    mean squared error; the completion term is the mean binary cross-entropy
    per valid step.

    Returns:
        dict with ``loss`` (the weighted total) and ``dec``, ``post``, ``end``
    """
    frame_mask = batch.frame_mask[..., None]
    frame_count = float(batch.frame_mask.sum()) * cfg.d_mel
    step_count = float(batch.step_mask.sum())

    if cfg.output_mode == 'gmm':
        steps = batch.step_mask.shape[1]
        targets = batch.y.reshape(batch.size, steps, cfg.frame_dim)
        # padding frames in a final partial step carry no likelihood
        dim_mask = np.repeat(batch.frame_mask, cfg.d_mel, axis=1).reshape(batch.size, steps, cfg.frame_dim)
        gmm = gmm_partition(tape, output.raw, cfg.mixtures, cfg.frame_dim)
        nll = gmm_nll(tape, gmm, targets, mask=dim_mask)
        dec = _masked_mean(tape, nll, batch.step_mask, step_count)
    else:
        diff = output.frames - batch.y
        dec = _masked_mean(tape, diff * diff, frame_mask, frame_count)

    post_diff = output.post - batch.y
    post = _masked_mean(tape, post_diff * post_diff, frame_mask, frame_count)

    logits = output.end_logits
    cross_entropy = tape.softplus(logits) - logits * batch.end_labels
    end = _masked_mean(tape, cross_entropy, batch.step_mask, step_count)

    loss = weights.w_dec * dec + weights.w_post * post + weights.w_end * end
    return {'loss': loss, 'dec': dec, 'post': post, 'end': end}


class Adam:
    """Adaptive moment estimation with bias correction over a ParamStore."""

    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params: ParamStore, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, value in params.items():
            grad = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            params.set(name, value - lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def load_state(self, step: int, m: Dict[str, np.ndarray], v: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.m) - set(m))
        if missing and step:
            raise DataError(f"Optimizer state lacks moments for '{missing[0]}'")
        self.t = step
        for name in self.m:
            if name in m:
                self.m[name] = np.array(m[name], dtype=self.m[name].dtype)
                self.v[name] = np.array(v[name], dtype=self.v[name].dtype)


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    total: float
    dec: float
    post: float
    end: float
    l2: float
    grad_norm: float
    skipped: bool = False

    def to_row(self) -> str:
        cells = [str(self.step), str(self.epoch)]
        cells.extend(f"{getattr(self, name):.10g}" for name in LOG_COLUMNS[2:-1])
        cells.append('1' if self.skipped else '0')
        return '\t'.join(cells)


def l2_penalty(params: ParamStore, l2: float) -> float:
    return l2 * sum(float(np.sum(value * value)) for _, value in params.items())


def forward_loss(model: ScentModel, tape: Tape, batch: Batch, weights: LossWeights,
                 masks: MaskSource) -> Dict[str, Node]:
    output = model.teacher_forced(tape, batch.x, batch.x_lengths, batch.y, batch.frame_mask, masks)
    return total_loss(tape, output, batch, weights, model.cfg)


def train_step(model: ScentModel, batch: Batch, weights: LossWeights, cfg: TrainConfig, optimizer: Adam,
               lr: float, rng: np.random.Generator, step: int = 0, epoch: int = 0) -> StepRecord:
    """
    One teacher-forced update.

    The gradient of the L2 penalty ``l2 * ||theta||^2`` is added before
    clipping at ``cfg.clip_norm``. A non-finite loss or gradient skips the
    update and is reported on the record.
    """
    params = model.params
    params.zero_grad()
    l2 = l2_penalty(params, cfg.l2)
    skipped = StepRecord(step, epoch, lr, math.nan, math.nan, math.nan, math.nan, l2, math.nan, skipped=True)
    tape = Tape(params)
    try:
        terms = forward_loss(model, tape, batch, weights, MaskSource(model.cfg, rng, training=True))
        tape.backward(terms['loss'])
    except (NonFiniteError, DegenerateAlignmentError) as exc:
        logger.warning(
            "Training step skipped",
            extra={'event_type': 'step_skipped', 'step': step, 'reason': str(exc), 'ids': batch.ids}
        )
        return skipped

    grads = {name: grad + 2.0 * cfg.l2 * params[name] for name, grad in params.gradients().items()}
    norm = math.sqrt(sum(float(np.sum(grad * grad)) for grad in grads.values()))
    if not math.isfinite(norm):
        logger.warning(
            "Training step skipped",
            extra={'event_type': 'step_skipped', 'step': step, 'reason': 'non-finite gradient', 'ids': batch.ids}
        )
        return skipped
    if norm > cfg.clip_norm:
        scale = cfg.clip_norm / norm
        grads = {name: grad * scale for name, grad in grads.items()}
    optimizer.step(params, grads, lr)

    record = StepRecord(
        step=step,
        epoch=epoch,
        lr=lr,
        total=float(terms['loss'].value),
        dec=float(terms['dec'].value),
        post=float(terms['post'].value),
        end=float(terms['end'].value),
        l2=l2,
        grad_norm=norm,
    )
    logger.debug("Training step", extra={'event_type': 'train_step', **asdict(record)})
    return record


def batches(pairs: Sequence[TrainingPair], size: int, order: Optional[np.ndarray] = None) -> List[List[TrainingPair]]:
    order = np.arange(len(pairs)) if order is None else order
    return [[pairs[i] for i in order[start:start + size]] for start in range(0, len(order), size)]


def validation_loss(model: ScentModel, pairs: Sequence[TrainingPair], weights: LossWeights, batch_size: int) -> float:
    """Mean total loss over ``pairs`` without dropout or zoneout."""
    totals = []
    for group in batches(pairs, batch_size):
        batch = collate(group, model.cfg, model.stats)
        tape = Tape(model.params, record=False)
        masks = MaskSource(model.cfg, np.random.default_rng(0), training=False)
        terms = forward_loss(model, tape, batch, weights, masks)
        totals.append(float(terms['loss'].value))
    return float(np.mean(totals))


@dataclass
class TrainingSummary:
    epochs: int
    steps: int
    best_val: Optional[float]
    val_history: List[float] = field(default_factory=list)
    skipped_steps: int = 0


class Trainer:
    """
    Epoch loop with per-epoch checkpoints.

    ``latest.ckpt`` is written after every epoch and ``best.ckpt`` whenever
    the validation loss improves. After saving, the in-memory state is
    replaced by the state decoded from the written bytes, so resuming from
    ``latest.ckpt`` continues exactly as an uninterrupted run would.
    """

    def __init__(self, model: ScentModel, train_pairs: Sequence[TrainingPair],
                 val_pairs: Optional[Sequence[TrainingPair]], cfg: TrainConfig, weights: LossWeights,
                 run_dir: Union[str, Path]):
        self.model = model
        self.train_pairs = list(train_pairs)
        self.val_pairs = list(val_pairs or [])
        self.cfg = cfg.validate()
        self.weights = weights.validate()
        self.run_dir = Path(run_dir)
        self.optimizer = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps)
        self.epoch = 0
        self.step = 0
        self.best_val: Optional[float] = None
        if not self.train_pairs:
            raise DataError("No training pairs")

    @property
    def latest_path(self) -> Path:
        return self.run_dir / 'latest.ckpt'

    @property
    def best_path(self) -> Path:
        return self.run_dir / 'best.ckpt'

    @property
    def log_path(self) -> Path:
        return self.run_dir / 'train_log.tsv'

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.cfg.to_dict(),
            params=self.model.params,
            stats=self.model.stats,
            train_config=self.cfg.to_dict(),
            loss_weights=self.weights.to_dict(),
            epoch=self.epoch,
            step=self.step,
            adam_step=self.optimizer.t,
            best_val=self.best_val,
            adam_m=self.optimizer.m,
            adam_v=self.optimizer.v,
        )

    def adopt(self, checkpoint: Checkpoint) -> None:
        if checkpoint.model_config != self.model.cfg.to_dict():
            raise ConfigError("Checkpoint was written for a different model configuration")
        for name, value in checkpoint.params.items():
            self.model.params.set(name, value)
        self.model.stats = checkpoint.stats
        self.optimizer.load_state(checkpoint.adam_step, checkpoint.adam_m, checkpoint.adam_v)
        self.epoch = checkpoint.epoch
        self.step = checkpoint.step
        self.best_val = checkpoint.best_val

    def resume(self) -> bool:
        """Restore ``latest.ckpt`` if present; log rows past its step are dropped."""
        if not self.latest_path.exists():
            return False
        self.adopt(load_checkpoint(self.latest_path, self.model.params.dtype))
        if self.log_path.exists():
            lines = self.log_path.read_text(encoding='utf-8').splitlines() or ['\t'.join(LOG_COLUMNS)]
            kept = [lines[0]] + [line for line in lines[1:] if int(line.split('\t')[0]) <= self.step]
            self.log_path.write_text('\n'.join(kept) + '\n', encoding='utf-8')
        logger.info(
            "Training resumed",
            extra={'event_type': 'train_resumed', 'epoch': self.epoch, 'step': self.step}
        )
        return True

    def _log(self, records: Sequence[StepRecord]) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        fresh = not self.log_path.exists()
        with self.log_path.open('a', encoding='utf-8') as handle:
            if fresh:
                handle.write('\t'.join(LOG_COLUMNS) + '\n')
            for record in records:
                handle.write(record.to_row() + '\n')

    def run_epoch(self) -> List[StepRecord]:
        self.epoch += 1
        rng = np.random.default_rng([self.cfg.seed, self.epoch])
        lr = lr_schedule(self.epoch, self.cfg)
        order = rng.permutation(len(self.train_pairs))
        records = []
        for group in batches(self.train_pairs, self.cfg.batch, order):
            self.step += 1
            batch = collate(group, self.model.cfg, self.model.stats)
            records.append(train_step(
                self.model, batch, self.weights, self.cfg, self.optimizer, lr, rng, self.step, self.epoch
            ))
        self._log(records)
        return records

    def fit(self, epochs: Optional[int] = None, resume: bool = False) -> TrainingSummary:
        epochs = self.cfg.epochs if epochs is None else epochs
        if resume:
            self.resume()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        history = []
        skipped = 0
        while self.epoch < epochs:
            records = self.run_epoch()
            skipped += sum(record.skipped for record in records)
            completed = [record.total for record in records if not record.skipped]
            if self.val_pairs:
                val = validation_loss(self.model, self.val_pairs, self.weights, self.cfg.batch)
            else:
                val = float(np.mean(completed)) if completed else math.inf
            history.append(val)
            improved = math.isfinite(val) and (self.best_val is None or val < self.best_val)
            if improved:
                self.best_val = val
            payload = save_checkpoint(self.checkpoint(), self.latest_path)
            if improved:
                save_checkpoint(self.checkpoint(), self.best_path)
            self.adopt(decode_checkpoint(payload, str(self.latest_path), self.model.params.dtype))
            logger.info(
                "Epoch finished",
                extra={
                    'event_type': 'epoch_finished',
                    'epoch': self.epoch,
                    'val_loss': val,
                    'skipped_steps': sum(record.skipped for record in records),
                }
            )
        return TrainingSummary(self.epoch, self.step, self.best_val, history, skipped)
