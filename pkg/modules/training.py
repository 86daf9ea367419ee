"""
Training Module
Supervised training of the matcher: negative log-likelihood over the
augmented assignment, Adam with a constant-then-exponential learning-rate
schedule, validation by precision/recall, and the ablation runner.
"""
import dataclasses
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from modules.autodiff import Tape, Var, log, reduce_sum, take
from modules.checkpoint import TrainingState, save_checkpoint, save_training_state, state_path
from modules.errors import ConfigError, MatchingError, NumericalError, ShapeError
from modules.matcher import MatchSet, PartialAssignment
from modules.model import VARIANTS, Model, ModelConfig, ModelParams, bind_params, forward, init_model, match_pair
from modules.synthgen import DatasetManifest, GroundTruthLabels, SceneConfig, TrainingPair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    decay: float = 0.999998
    decay_start: int = 200_000
    iterations: int = 900_000
    batch_size: int = 32
    num_keypoints: Optional[int] = None
    seed: int = 0
    eval_interval: int = 1000
    validation_pairs: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0 or not (0.0 < self.decay <= 1.0):
            raise ConfigError("learning_rate must be positive and decay must lie in (0, 1]")
        if self.decay_start < 0 or self.iterations < 0:
            raise ConfigError("decay_start and iterations must be non-negative")
        if self.batch_size < 1 or self.eval_interval < 1 or self.validation_pairs < 0:
            raise ConfigError("batch_size and eval_interval must be >= 1, validation_pairs >= 0")
        if self.num_keypoints is not None and self.num_keypoints < 1:
            raise ConfigError(f"num_keypoints must be >= 1, got {self.num_keypoints}")

    def lr_at(self, iteration: int) -> float:
        """Constant until decay_start, then multiplied by decay every iteration."""
        if iteration < self.decay_start:
            return self.learning_rate
        return self.learning_rate * self.decay ** (iteration - self.decay_start)

    def scene_config(self, scene: SceneConfig) -> SceneConfig:
        if self.num_keypoints is None:
            return scene
        return dataclasses.replace(scene, num_points=self.num_keypoints)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            {name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()},
            {name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float
) -> Tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update; inputs are left untouched."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params: ModelParams = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        if name not in grads:
            raise ShapeError(f"adam: no gradient for parameter {name}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(value) or state.m[name].shape != g.shape:
            raise ShapeError(f"adam: gradient for {name} has shape {g.shape}, parameter {np.shape(value)}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam: non-finite gradient for parameter {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params[name] = np.asarray(value, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, step, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def label_indices(labels: GroundTruthLabels, m: int, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row/column indices into P-bar of every labeled entry."""
    for i, j in labels.matches:
        if not (0 <= i < m and 0 <= j < n):
            raise MatchingError(f"label match ({i}, {j}) outside a {m}x{n} assignment")
    if any(not 0 <= i < m for i in labels.unmatched_a) or any(not 0 <= j < n for j in labels.unmatched_b):
        raise MatchingError(f"unmatched label outside a {m}x{n} assignment")
    rows = [i for i, _ in labels.matches] + list(labels.unmatched_a) + [m] * len(labels.unmatched_b)
    cols = [j for _, j in labels.matches] + [n] * len(labels.unmatched_a) + list(labels.unmatched_b)
    return np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp)


def nll_loss(assignment: PartialAssignment, labels: GroundTruthLabels) -> Var:
    """
    -sum log P[i, j] over matches, -sum log P[i, N+1] over unmatched A,
    -sum log P[M+1, j] over unmatched B. Unlabeled keypoints add nothing.
    """
    p_bar = assignment.p_bar
    m, n = p_bar.shape[0] - 1, p_bar.shape[1] - 1
    rows, cols = label_indices(labels, m, n)
    if rows.size == 0:
        return p_bar.tape.constant(0.0)
    entries = p_bar.value[rows, cols]
    if np.any(entries <= 0):
        k = int(np.argmax(entries <= 0))
        raise NumericalError(f"assignment entry P[{rows[k]}, {cols[k]}] = {entries[k]} is not positive")
    if assignment.log_p_bar is not None:
        picked = take(assignment.log_p_bar, (rows, cols))
    else:
        picked = log(take(p_bar, (rows, cols)))
    return -reduce_sum(picked)


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def loss_and_gradient(model: Model, pair: TrainingPair, dtype=np.float64) -> Tuple[float, Dict[str, np.ndarray]]:
    tape = Tape(dtype)
    result = forward(bind_params(tape, model.params), pair.features_a, pair.features_b, model.config)
    loss = nll_loss(result.assignment, pair.labels)
    return float(loss.value), tape.gradient(loss)


def train_step(model: Model, pair: TrainingPair, state: AdamState, lr: float) -> Tuple[float, Model, AdamState]:
    loss, grads = loss_and_gradient(model, pair)
    params, state = adam_step(model.params, grads, state, lr)
    return loss, Model(model.config, params), state


def train_batch(
    model: Model, pairs: Sequence[TrainingPair], state: AdamState, lr: float
) -> Tuple[float, Model, AdamState]:
    """One optimizer step on the mean loss of pairs, processed in order."""
    if not pairs:
        raise MatchingError("train_batch needs at least one pair")
    total_loss = 0.0
    total: Dict[str, np.ndarray] = {}
    for pair in pairs:
        loss, grads = loss_and_gradient(model, pair)
        total_loss += loss
        for name, g in grads.items():
            total[name] = total[name] + g if name in total else g
    scale = 1.0 / len(pairs)
    mean_grads = {name: g * scale for name, g in total.items()}
    params, state = adam_step(model.params, mean_grads, state, lr)
    return total_loss * scale, Model(model.config, params), state


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class PRMetrics:
    precision: float
    recall: float
    matching_score: float
    num_pairs: int

    @property
    def score(self) -> float:
        return self.precision * self.recall

    def to_dict(self) -> dict:
        return asdict(self)


def pair_metrics(predicted: MatchSet, labels: GroundTruthLabels, num_keypoints: int) -> Tuple[float, float, float]:
    truth = labels.match_set
    correct = len(predicted.pairs & truth)
    if len(predicted) == 0:
        precision = 1.0 if not truth else 0.0
    else:
        precision = correct / len(predicted)
    recall = correct / len(truth) if truth else 1.0
    matching_score = correct / num_keypoints if num_keypoints else 0.0
    return precision, recall, matching_score


def evaluate_pr(
    predictions: Sequence[MatchSet], labels: Sequence[GroundTruthLabels], num_keypoints: Sequence[int]
) -> PRMetrics:
    """Per-pair precision, recall and matching score, averaged over pairs."""
    if not (len(predictions) == len(labels) == len(num_keypoints)):
        raise MatchingError("predictions, labels and keypoint counts differ in length")
    if not predictions:
        return PRMetrics(0.0, 0.0, 0.0, 0)
    rows = np.array([pair_metrics(p, l, k) for p, l, k in zip(predictions, labels, num_keypoints)])
    precision, recall, matching_score = rows.mean(axis=0)
    return PRMetrics(float(precision), float(recall), float(matching_score), len(predictions))


def validate(model: Model, pairs: Sequence[TrainingPair]) -> PRMetrics:
    predictions = [match_pair(model, p.features_a, p.features_b).matches for p in pairs]
    return evaluate_pr(predictions, [p.labels for p in pairs], [p.features_a.num_keypoints for p in pairs])


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

DataSource = Union[DatasetManifest, Sequence[TrainingPair]]


@dataclass
class TrainResult:
    model: Model
    best_model: Model
    metrics: List[dict]
    iterations: int
    state: TrainingState
    exhausted: bool = False


def _fetch(data: DataSource, index: int) -> Optional[TrainingPair]:
    if isinstance(data, DatasetManifest):
        if data.num_pairs is not None and index >= data.num_pairs:
            return None
        return data.pair(index)
    return data[index] if index < len(data) else None


def _validation_pairs(data: DataSource, config: TrainConfig) -> List[TrainingPair]:
    if not isinstance(data, DatasetManifest) or config.validation_pairs == 0:
        return []
    split = dataclasses.replace(data, num_pairs=config.validation_pairs, stream=1)
    return list(split)


def warm_start(model: Model, source: Mapping[str, np.ndarray]) -> Model:
    """Copy every tensor of source whose name and shape fit model."""
    params = dict(model.params)
    copied = 0
    for name, value in source.items():
        if name in params and params[name].shape == np.shape(value):
            params[name] = np.array(value, dtype=np.float64)
            copied += 1
    logger.info("Initialized %d of %d tensors from another model", copied, len(params))
    return Model(model.config, params)


def write_metrics(metrics: List[dict], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.DataFrame(metrics, columns=["iter", "loss", "precision", "recall", "matching_score", "lr"]).to_json(
        path, orient="records", lines=True
    )


def train_loop(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data: DataSource,
    validation: Optional[Sequence[TrainingPair]] = None,
    checkpoint_path: Optional[str] = None,
    metrics_path: Optional[str] = None,
    resume: Optional[TrainingState] = None,
    init_params: Optional[Mapping[str, np.ndarray]] = None,
) -> TrainResult:
    """
    Iteration k trains on pairs k*batch .. k*batch+batch-1 of data. Every
    eval_interval iterations, and after the last one, the model is validated;
    the best by precision*recall is kept and written to checkpoint_path.
    Without validation pairs only the loss is logged and no metrics are
    recorded. A finite data source that runs out stops the loop early with a
    warning.
    """
    if resume is not None:
        if resume.config != model_config:
            raise ConfigError("resumed training state was recorded with a different model configuration")
        model = Model(model_config, {k: np.array(v) for k, v in resume.params.items()})
        adam = AdamState(dict(resume.moment1), dict(resume.moment2), resume.step)
        start = resume.iteration
        best_score = resume.best_score
        best_params = resume.best_params
        metrics = list(resume.metrics)
        interval_losses = list(resume.interval_losses)
        logger.info("Resuming training at iteration %d", start)
    else:
        model = init_model(model_config, train_config.seed)
        if init_params is not None:
            model = warm_start(model, init_params)
        adam = AdamState.zeros_like(model.params)
        start, best_score, best_params = 0, -1.0, None
        metrics, interval_losses = [], []

    if validation is None:
        validation = _validation_pairs(data, train_config)

    def checkpoint_validation(iteration: int, lr: float) -> None:
        nonlocal best_score, best_params, interval_losses
        loss = float(np.mean(interval_losses)) if interval_losses else float("nan")
        interval_losses = []
        if not validation:
            logger.info("iter %d: loss %.4f", iteration, loss)
            return
        result = validate(model, validation)
        metrics.append({
            "iter": iteration,
            "loss": loss,
            "precision": result.precision,
            "recall": result.recall,
            "matching_score": result.matching_score,
            "lr": lr,
        })
        logger.info("iter %d: loss %.4f precision %.3f recall %.3f", iteration, loss, result.precision, result.recall)
        if result.score > best_score:
            best_score, best_params = result.score, model.params
            if checkpoint_path:
                save_checkpoint(Model(model_config, best_params), checkpoint_path)
        if metrics_path:
            write_metrics(metrics, metrics_path)

    exhausted = False
    iteration = start
    lr = train_config.lr_at(iteration)
    while iteration < train_config.iterations:
        base = iteration * train_config.batch_size
        batch = [_fetch(data, base + k) for k in range(train_config.batch_size)]
        if any(pair is None for pair in batch):
            logger.warning(
                "Training data exhausted at iteration %d of %d; stopping", iteration, train_config.iterations
            )
            exhausted = True
            break
        lr = train_config.lr_at(iteration)
        loss, model, adam = train_batch(model, batch, adam, lr)
        interval_losses.append(loss)
        logger.debug("iter %d loss %.6f lr %.3e", iteration, loss, lr)
        iteration += 1
        if iteration % train_config.eval_interval == 0:
            checkpoint_validation(iteration, lr)

    # the last iterate is always validated
    if iteration > start and iteration % train_config.eval_interval:
        checkpoint_validation(iteration, lr)

    state = TrainingState(
        model_config, model.params, adam.m, adam.v, adam.step, iteration,
        best_score, best_params, metrics, interval_losses,
    )
    best_model = Model(model_config, best_params if best_params is not None else model.params)
    if checkpoint_path:
        if best_params is None:
            save_checkpoint(best_model, checkpoint_path)
        save_training_state(state, state_path(checkpoint_path))
    if metrics_path:
        write_metrics(metrics, metrics_path)
    return TrainResult(model, best_model, metrics, iteration, state, exhausted)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def run_ablation(
    model_config: ModelConfig,
    train_config: TrainConfig,
    manifest: DatasetManifest,
    test_pairs: Sequence[TrainingPair],
    variants: Sequence[str] = VARIANTS,
    seeds: Sequence[int] = (0, 1, 2),
    extra_layers: Sequence[int] = (),
) -> pd.DataFrame:
    """
    Train every variant under the same budget and seeds and report the
    median test precision/recall per variant. extra_layers adds rows for
    the full model at other layer counts.
    """
    runs = [(variant, dataclasses.replace(model_config, variant=variant)) for variant in variants]
    runs += [(f"full_L{layers}", dataclasses.replace(model_config, variant="full", num_layers=layers))
             for layers in extra_layers]
    rows = []
    for name, config in runs:
        for seed in seeds:
            result = train_loop(
                config,
                dataclasses.replace(train_config, seed=seed),
                dataclasses.replace(manifest, master_seed=manifest.master_seed + seed),
            )
            scores = validate(result.best_model, test_pairs)
            rows.append({"variant": name, "seed": seed, "precision": scores.precision,
                         "recall": scores.recall, "matching_score": scores.matching_score})
            logger.info("ablation %s seed %d: precision %.3f recall %.3f", name, seed, scores.precision, scores.recall)
    table = pd.DataFrame(rows)
    order = {name: k for k, (name, _) in enumerate(runs)}
    summary = table.groupby("variant")[["precision", "recall", "matching_score"]].median().reset_index()
    return summary.sort_values("variant", key=lambda column: column.map(order)).reset_index(drop=True)
