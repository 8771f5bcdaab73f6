"""Two-phase trainer: instance contrastive pretraining, then end-to-end training.

Per-sample forward/backward passes run on their own tapes and may be spread
over worker threads; gradients are summed in sample order so the result does
not depend on the worker count. Every random draw of an epoch comes from the
state's generator on the calling thread.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .codecs import read_tensor, write_tensor
from .errors import ContractError, DatasetError, ShapeError
from .imgeo import AugmentedSample, BinaryMask, augment, flip_pair
from .layers import Parameter
from .losses import pretrain_loss, train_loss
from .net import PRETRAINED_PREFIXES, SegmentationNet
from .synthdata import Sample
from .tensor_core import GradTape, Tensor, reduce_mean, stack
from .uoic import contrastive_batch, embed_sample, info_nce

logger = logging.getLogger(__name__)

THRESHOLD = 0.5
PHASE_PRETRAIN = "pretrain"
PHASE_TRAIN = "train"


@dataclass
class TrainSettings:
    lr: float = 1e-4
    batch_size: int = 8
    lambda_aux: float = 0.1
    lambda_ic: float = 1.0
    temperature: float = 0.10
    scale_range: Tuple[float, float] = (0.3, 0.7)
    max_paste_retries: int = 3
    flips: bool = True
    workers: int = 1


# Metrics

@dataclass
class Metrics:
    miou: float = 0.0
    mdsc: float = 0.0
    recall: float = 0.0
    precision: float = 0.0

    def as_row(self) -> Dict[str, float]:
        return {"mIoU": self.miou, "mDSC": self.mdsc, "recall": self.recall, "precision": self.precision}


def image_metrics(y_hat: np.ndarray, y: np.ndarray) -> Metrics:
    """IoU, Dice, recall and precision of one image at threshold 0.5."""
    pred = np.asarray(y_hat) > THRESHOLD
    gt = np.asarray(y).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    if not gt.any():
        score = 1.0 if not pred.any() else 0.0
        return Metrics(score, score, score, score)
    tp = float(np.sum(pred & gt))
    fp = float(np.sum(pred & ~gt))
    fn = float(np.sum(~pred & gt))
    return Metrics(miou=tp / (tp + fp + fn),
                   mdsc=2.0 * tp / (2.0 * tp + fp + fn),
                   recall=tp / (tp + fn),
                   precision=tp / (tp + fp) if tp + fp > 0 else 0.0)


def mean_metrics(per_image: Sequence[Metrics]) -> Metrics:
    if not per_image:
        return Metrics()
    return Metrics(*(float(np.mean([getattr(m, f) for m in per_image]))
                     for f in ("miou", "mdsc", "recall", "precision")))


# Optimiser

class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Sequence[Tuple[str, Parameter]], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, param in params:
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != param.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {param.shape}")
            m = self.m.get(name, np.zeros_like(param.data))
            v = self.v.get(name, np.zeros_like(param.data))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            param.data = param.data - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


@dataclass
class TrainState:
    network: SegmentationNet
    optimizer: Adam
    rng: np.random.Generator
    seed: int = 0
    epoch: int = 0
    phase: str = PHASE_TRAIN
    history: List[dict] = field(default_factory=list)


def new_state(network: SegmentationNet, settings: TrainSettings, seed: int, phase: str = PHASE_TRAIN) -> TrainState:
    return TrainState(network=network, optimizer=Adam(lr=settings.lr),
                      rng=np.random.default_rng(seed), seed=seed, phase=phase)


# Per-sample passes

def _gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tuple[str, Parameter]]):
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss, populate=False)
    return loss.item(), {name: tape.grad_of(param) for name, param in params}


def _batches(order: np.ndarray, size: int) -> List[np.ndarray]:
    return [order[i:i + size] for i in range(0, len(order), size)]


def _flip(sample: Sample, draws: Tuple[bool, bool]) -> Tuple[np.ndarray, BinaryMask]:
    return flip_pair(sample.image, sample.mask, horizontal=draws[0], vertical=draws[1])


def _flip_draws(rng: np.random.Generator, count: int, enabled: bool) -> List[Tuple[bool, bool]]:
    draws = rng.random((count, 2)) < 0.5
    return [(bool(h) and enabled, bool(v) and enabled) for h, v in draws]


def _reduce(results: Sequence[Tuple[float, Dict[str, np.ndarray]]]):
    total_loss = 0.0
    summed: Dict[str, np.ndarray] = {}
    for loss, grads in results:
        total_loss += loss
        for name, g in grads.items():
            summed[name] = g.copy() if name not in summed else summed[name] + g
    count = len(results)
    return total_loss / count, {name: g / count for name, g in summed.items()}


def train_epoch(state: TrainState, dataset: Sequence[Sample], settings: TrainSettings) -> dict:
    """One pass of the segmentation objective with auxiliary guidance supervision."""
    if not dataset:
        raise DatasetError("training set is empty")
    network = state.network
    params = list(network.named_parameters())
    order = state.rng.permutation(len(dataset))
    losses = []

    def sample_pass(args):
        sample, draws = args
        image, mask = _flip(sample, draws)

        def loss_fn():
            out = network(image)
            return train_loss(out.y_hat, mask, out.m_hat_up, settings.lambda_aux)

        return _gradients(loss_fn, params)

    with ThreadPoolExecutor(max_workers=max(1, settings.workers)) as pool:
        for batch in _batches(order, settings.batch_size):
            draws = _flip_draws(state.rng, len(batch), settings.flips)
            jobs = [(dataset[int(i)], d) for i, d in zip(batch, draws)]
            results = list(pool.map(sample_pass, jobs)) if settings.workers > 1 else [sample_pass(j) for j in jobs]
            loss, grads = _reduce(results)
            state.optimizer.step(params, grads)
            losses.append(loss)

    state.epoch += 1
    return {"epoch": state.epoch, "phase": PHASE_TRAIN, "loss": float(np.mean(losses))}


def pretrain_epoch(state: TrainState, dataset: Sequence[Sample], settings: TrainSettings) -> dict:
    """One pass of copy-paste augmented segmentation plus in-batch InfoNCE.

    The whole batch shares one tape because every anchor contrasts against the
    negatives of all samples. Only encoder and guidance-head weights move.
    """
    if not dataset:
        raise DatasetError("pretraining set is empty")
    network = state.network
    params = [(n, p) for n, p in network.named_parameters() if n.startswith(PRETRAINED_PREFIXES)]
    order = state.rng.permutation(len(dataset))
    counters = {"fallbacks": 0, "skipped": 0, "dropped_negatives": 0, "nce_dropped": 0}
    losses, nce_values = [], []

    for batch in _batches(order, settings.batch_size):
        draws = _flip_draws(state.rng, len(batch), settings.flips)
        seeds = state.rng.integers(0, 2 ** 63 - 1, size=len(batch))
        augmented: List[AugmentedSample] = []
        for index, flip, seed in zip(batch, draws, seeds):
            image, mask = _flip(dataset[int(index)], flip)
            sample = augment(image, mask, np.random.default_rng(int(seed)), settings.scale_range,
                             settings.max_paste_retries, seed=int(seed))
            if not sample.success:
                counters["fallbacks"] += 1
            augmented.append(sample)

        nce_holder = {}

        def loss_fn():
            predictions, pooled = [], []
            for sample in augmented:
                features, y_hat_cp = network.pretrain_forward(sample.image)
                embeddings = embed_sample(features, sample, y_hat_cp)
                predictions.append((y_hat_cp, sample.mask))
                pooled.append(embeddings)
            nce = info_nce(contrastive_batch(pooled, settings.temperature))
            nce_holder["result"], nce_holder["pooled"] = nce, pooled
            per_sample = [pretrain_loss(y_hat, y, nce.loss, settings.lambda_ic) for y_hat, y in predictions]
            return reduce_mean(stack(per_sample))

        loss, grads = _gradients(loss_fn, params)
        state.optimizer.step(params, grads)
        losses.append(loss)
        nce = nce_holder["result"]
        counters["nce_dropped"] += nce.dropped
        counters["skipped"] += sum(1 for e in nce_holder["pooled"] if e.z_a is None)
        counters["dropped_negatives"] += sum(1 for e in nce_holder["pooled"] if e.z_bg is None)
        if nce.loss is not None:
            nce_values.append(nce.loss.item())

    state.epoch += 1
    row = {"epoch": state.epoch, "phase": PHASE_PRETRAIN, "loss": float(np.mean(losses)),
           "nce": float(np.mean(nce_values)) if nce_values else float("nan")}
    row.update(counters)
    return row


def evaluate(network: SegmentationNet, dataset: Sequence[Sample], lambda_aux: float = 0.1) -> Tuple[Metrics, float]:
    """Mean metrics and mean training loss over ``dataset``, without recording a tape."""
    per_image, losses = [], []
    for sample in dataset:
        out = network(sample.image)
        losses.append(train_loss(out.y_hat, sample.mask, out.m_hat_up, lambda_aux).item())
        per_image.append(image_metrics(out.y_hat.data, sample.mask.bits))
    return mean_metrics(per_image), float(np.mean(losses)) if losses else 0.0


def fit(state: TrainState, train_set: Sequence[Sample], val_set: Sequence[Sample],
        settings: TrainSettings, epochs: int,
        on_epoch: Optional[Callable[[TrainState, dict], None]] = None) -> TrainState:
    """Run ``train_epoch`` until ``state.epoch == epochs``, evaluating on ``val_set`` after each."""
    while state.epoch < epochs:
        row = train_epoch(state, train_set, settings)
        metrics, val_loss = evaluate(state.network, val_set, settings.lambda_aux)
        row.update({"split": "val", "val_loss": val_loss, **metrics.as_row()})
        state.history.append(row)
        logger.info("epoch %d loss=%.6f val_loss=%.6f mIoU=%.4f mDSC=%.4f",
                    state.epoch, row["loss"], val_loss, metrics.miou, metrics.mdsc)
        if on_epoch is not None:
            on_epoch(state, row)
    return state


def pretrain(state: TrainState, dataset: Sequence[Sample], settings: TrainSettings, epochs: int,
             on_epoch: Optional[Callable[[TrainState, dict], None]] = None) -> TrainState:
    state.phase = PHASE_PRETRAIN
    while state.epoch < epochs:
        row = pretrain_epoch(state, dataset, settings)
        state.history.append(row)
        logger.info("pretrain epoch %d loss=%.6f nce=%.6f fallbacks=%d skipped=%d dropped_negatives=%d",
                    state.epoch, row["loss"], row["nce"], row["fallbacks"], row["skipped"],
                    row["dropped_negatives"])
        if on_epoch is not None:
            on_epoch(state, row)
    return state


# Checkpoints

MANIFEST = "manifest.csv"
STATE_FILE = "state.json"


def _tensor_file(role: str, name: str) -> str:
    return f"{role}/{name}.uhrd"


def save_checkpoint(state: TrainState, directory: Path, config_text: str = "") -> Path:
    """Write parameters and Adam moments as UHRD blobs plus a manifest and a JSON state file."""
    directory = Path(directory)
    entries = [("param", name, value) for name, value in state.network.state_dict().items()]
    opt = state.optimizer.state_dict()
    entries += [("adam_m", name, value) for name, value in sorted(opt["m"].items())]
    entries += [("adam_v", name, value) for name, value in sorted(opt["v"].items())]

    for role in ("param", "adam_m", "adam_v"):
        (directory / role).mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["name", "shape", "role", "file"])
        for role, name, value in entries:
            relative = _tensor_file(role, name)
            write_tensor(directory / relative, value, magic=b"UHRD")
            writer.writerow([name, "x".join(str(d) for d in value.shape), role, relative])

    payload = {
        "epoch": state.epoch,
        "phase": state.phase,
        "seed": state.seed,
        "adam_t": opt["t"],
        "rng": state.rng.bit_generator.state,
        "history": state.history,
        "config": config_text,
    }
    (directory / STATE_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True))
    return directory


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    meta: dict


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"checkpoint manifest not found: {manifest}")
    tensors = {"param": {}, "adam_m": {}, "adam_v": {}}
    with open(manifest, newline="") as handle:
        for row in csv.DictReader(handle):
            role = row["role"]
            if role not in tensors:
                raise ContractError(f"{manifest}: unknown role {role!r}")
            path = directory / row["file"]
            if not path.is_file():
                raise DatasetError(f"checkpoint tensor missing: {path}")
            value = read_tensor(path)
            expected = tuple(int(d) for d in row["shape"].split("x") if d)
            if value.shape != expected:
                raise ShapeError(f"{path}: shape {value.shape} disagrees with manifest {expected}")
            tensors[role][row["name"]] = value
    meta = json.loads((directory / STATE_FILE).read_text()) if (directory / STATE_FILE).is_file() else {}
    return Checkpoint(tensors["param"], tensors["adam_m"], tensors["adam_v"], meta)


def restore_state(state: TrainState, checkpoint: Checkpoint) -> TrainState:
    """Load a checkpoint into ``state`` so training continues exactly where it stopped."""
    state.network.load_state_dict(checkpoint.params)
    meta = checkpoint.meta
    state.optimizer.load_state_dict({"t": meta.get("adam_t", 0), "m": checkpoint.adam_m, "v": checkpoint.adam_v})
    state.epoch = int(meta.get("epoch", 0))
    state.phase = meta.get("phase", PHASE_TRAIN)
    state.seed = int(meta.get("seed", state.seed))
    state.history = list(meta.get("history", []))
    if "rng" in meta:
        state.rng.bit_generator.state = meta["rng"]
    return state
