"""Data partitioning, batching, Adam and the early-stopping training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import metrics
from .corpus import Corpus
from .ema import (LA_VARIANTS, ChannelStats, articulatory_trajectories, finish_targets,
                  fit_channel_stats, resample_to_frame_rate)
from .errors import (ArtinvError, ConfigError, EmptyBatch, NegativeRadicand, NumericalError,
                     SelectorError, ShapeError)
from .frontend import extract_acoustic_features, normalize_waveform
from .model import (SMOOTHER_MODES, InversionModel, ModelConfig, forward_batch, init_model,
                    loss_and_gradients)

log = logging.getLogger(__name__)

MODES = ("SD", "SI", "CD", "CC")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "SD"
    speaker: Optional[str] = None
    test_speaker: Optional[str] = None
    corpus: Optional[str] = None
    train_corpus: Optional[str] = None
    test_corpus: Optional[str] = None
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 7
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    smoother_mode: str = "fixed"
    la_variant: str = "literal"
    shuffle_targets: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ConfigError("need 0 <= patience < max_epochs")
        if self.smoother_mode not in SMOOTHER_MODES:
            raise ConfigError(f"smoother_mode must be one of {SMOOTHER_MODES}")
        if self.la_variant not in LA_VARIANTS:
            raise ConfigError(f"la_variant must be one of {LA_VARIANTS}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        required = {"SD": ("speaker",), "SI": ("test_speaker",), "CD": ("corpus",),
                    "CC": ("train_corpus", "test_corpus")}[self.mode]
        missing = [k for k in required if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"mode {self.mode} needs selector(s) {missing}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown experiment keys: {unknown}")
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            mknown = {f.name for f in fields(ModelConfig)}
            bad = sorted(set(d["model"]) - mknown)
            if bad:
                raise ConfigError(f"unknown model keys: {bad}")
            d["model"] = ModelConfig(**d["model"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class DataSplit:
    train: list
    validation: list
    test: list

    def __post_init__(self):
        sets = [set(self.train), set(self.validation), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise SelectorError("split partitions overlap")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    ids: list
    acoustic: np.ndarray
    target: np.ndarray
    mask: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_pcc: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    early_stopped: bool = False
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d


@dataclass
class PreparedData:
    """Normalised network inputs and targets keyed by utterance id."""

    acoustic: dict
    targets: dict
    acoustic_stats: ChannelStats
    target_stats: ChannelStats
    split: DataSplit
    flagged: list = field(default_factory=list)

    def items(self, ids: Iterable[str]):
        return [(i, self.acoustic[i], self.targets[i]) for i in ids]


# ---------------------------------------------------------------------------
# splits


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int, fractions=SPLIT_FRACTIONS) -> tuple[int, int, int]:
    n_train = _round_half_up(fractions[0] * n)
    n_val = min(_round_half_up(fractions[1] * n), n - n_train)
    return n_train, n_val, n - n_train - n_val


def _entries(sources) -> list[tuple[str, str, str]]:
    """(utterance id, speaker, corpus) triples from corpora or manifests."""
    out = []
    for src in sources:
        manifest = getattr(src, "manifest", src)
        out.extend((u.id, u.speaker, manifest.corpus) for u in manifest.utterances)
    ids = [e[0] for e in out]
    if len(set(ids)) != len(ids):
        raise SelectorError("utterance ids must be unique across corpora")
    return out


def _shuffled(ids: list, rng: np.random.Generator) -> list:
    ids = sorted(ids)
    return [ids[i] for i in rng.permutation(len(ids))]


def make_split(sources: Sequence, cfg: ExperimentConfig) -> DataSplit:
    """Partition utterances for the configured mode.

    SD and CD split one speaker / one corpus 70/10/20. SI tests on every
    utterance of the held-out speaker, training on the rest of its corpus
    split 7:1 into train and validation. CC trains on exactly the CD
    train/validation sets of the training corpus and tests on all of the
    other corpus.
    """
    entries = _entries(sources)
    rng = np.random.default_rng(cfg.seed)
    corpora = {c for _, _, c in entries}
    speakers = {s for _, s, _ in entries}

    def need(kind, value, known):
        if value not in known:
            raise SelectorError(f"unknown {kind} {value!r}; have {sorted(known)}")

    def three_way(ids):
        ids = _shuffled(ids, rng)
        n_tr, n_va, _ = split_counts(len(ids))
        return DataSplit(ids[:n_tr], ids[n_tr:n_tr + n_va], ids[n_tr + n_va:])

    def train_val(ids):
        ids = _shuffled(ids, rng)
        n_va = max(1, _round_half_up(len(ids) / 8)) if len(ids) > 1 else 0
        return ids[n_va:], ids[:n_va]

    if cfg.corpus is not None:
        need("corpus", cfg.corpus, corpora)
    if cfg.mode == "SD":
        need("speaker", cfg.speaker, speakers)
        split = three_way([i for i, s, c in entries
                           if s == cfg.speaker and (cfg.corpus is None or c == cfg.corpus)])
    elif cfg.mode == "CD":
        split = three_way([i for i, _, c in entries if c == cfg.corpus])
    elif cfg.mode == "SI":
        need("speaker", cfg.test_speaker, speakers)
        home = cfg.corpus or next(c for _, s, c in entries if s == cfg.test_speaker)
        test = sorted(i for i, s, _ in entries if s == cfg.test_speaker)
        train, val = train_val([i for i, s, c in entries if c == home and s != cfg.test_speaker])
        split = DataSplit(train, val, test)
    else:
        need("corpus", cfg.train_corpus, corpora)
        need("corpus", cfg.test_corpus, corpora)
        if cfg.train_corpus == cfg.test_corpus:
            raise SelectorError("CC mode needs two different corpora")
        # same train/validation draw as CD on the training corpus; its test fifth goes unused
        home = three_way([i for i, _, c in entries if c == cfg.train_corpus])
        split = DataSplit(home.train, home.validation, sorted(i for i, _, c in entries if c == cfg.test_corpus))
    if not split.train or not split.validation:
        raise SelectorError(f"{cfg.mode} split leaves an empty train or validation set")
    return split


# ---------------------------------------------------------------------------
# data preparation


def utterance_features(utt, la_variant: str, model_cfg: ModelConfig = ModelConfig()):
    """Acoustic T x 429 and pre-normalisation articulatory T x 16 for one utterance."""
    w = normalize_waveform(utt.waveform.samples, utt.waveform.sample_rate)
    acoustic = extract_acoustic_features(w).frames
    arts = articulatory_trajectories(utt.ema, acoustic.shape[0], la_variant,
                                     model_cfg.cutoff_hz, model_cfg.kernel_taps, model_cfg.frame_rate)
    return acoustic, arts


def _derange(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        return np.arange(n)
    while True:
        p = rng.permutation(n)
        if np.all(p != np.arange(n)):
            return p


def prepare_data(corpora: Sequence[Corpus], split: DataSplit, cfg: ExperimentConfig,
                 acoustic_stats: Optional[ChannelStats] = None,
                 target_stats: Optional[ChannelStats] = None) -> PreparedData:
    """Extract features for every split member and normalise with train-set stats.

    Utterances whose lip-aperture radicand goes negative are logged, flagged
    and dropped.
    """
    lookup = {}
    for c in corpora:
        lookup.update(c.utterances)
    raw_ac, raw_art, flagged = {}, {}, []
    for uid in split.train + split.validation + split.test:
        try:
            raw_ac[uid], raw_art[uid] = utterance_features(lookup[uid], cfg.la_variant, cfg.model)
        except NegativeRadicand as exc:
            log.warning("utterance %s flagged and skipped: %s", uid, exc)
            flagged.append(uid)
        except KeyError:
            raise SelectorError(f"utterance {uid} not found in the loaded corpora") from None
    kept = DataSplit(*[[u for u in part if u not in flagged]
                       for part in (split.train, split.validation, split.test)])
    if not kept.train or not kept.validation:
        raise SelectorError("no usable training or validation utterances left")
    if cfg.shuffle_targets:
        # control condition: pair each train/val utterance with another's trajectory
        rng = np.random.default_rng([cfg.seed, 99])
        for part in (kept.train, kept.validation):
            perm = _derange(len(part), rng)
            donors = [raw_art[part[j]] for j in perm]
            for uid, donor in zip(part, donors):
                T = raw_ac[uid].shape[0]
                raw_art[uid] = resample_to_frame_rate(donor, 1.0, T, T / donor.shape[0])
    if acoustic_stats is None:
        acoustic_stats = fit_channel_stats([raw_ac[u] for u in kept.train])
    if target_stats is None:
        target_stats = fit_channel_stats([raw_art[u] for u in kept.train])
    m = cfg.model
    acoustic = {u: acoustic_stats.apply(a) for u, a in raw_ac.items()}
    targets = {u: finish_targets(a, target_stats, m.cutoff_hz, m.kernel_taps, m.frame_rate)
               for u, a in raw_art.items()}
    return PreparedData(acoustic, targets, acoustic_stats, target_stats, kept, flagged)


# ---------------------------------------------------------------------------
# batching, loss, optimiser


def pad_batch(items: Sequence[tuple]) -> Batch:
    """Right-pad (id, acoustic, target) triples into one batch."""
    T = max(a.shape[0] for _, a, _ in items)
    B = len(items)
    d_in, d_out = items[0][1].shape[1], items[0][2].shape[1]
    X = np.zeros((B, T, d_in))
    Y = np.zeros((B, T, d_out))
    mask = np.zeros((B, T), dtype=bool)
    for b, (_, a, y) in enumerate(items):
        if a.shape[0] != y.shape[0]:
            raise ShapeError("acoustic and target lengths differ")
        X[b, :a.shape[0]] = a
        Y[b, :y.shape[0]] = y
        mask[b, :a.shape[0]] = True
    return Batch([i for i, _, _ in items], X, Y, mask)


def make_batches(items: Sequence[tuple], batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Length-bucketed, seeded batches.

    Shuffle with ``seed + epoch``, stable-sort by length so neighbours have
    similar lengths, cut into groups, then shuffle the order of the full
    groups (the short remainder group stays last).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed + epoch)
    order = rng.permutation(len(items))
    order = sorted(order, key=lambda k: items[k][1].shape[0])
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    full = [g for g in groups if len(g) == batch_size]
    rest = [g for g in groups if len(g) != batch_size]
    full = [full[k] for k in rng.permutation(len(full))]
    return [pad_batch([items[k] for k in g]) for g in full + rest]


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over valid frames and all channels."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape[:-1] != mask.shape:
        raise ShapeError(f"shape mismatch pred {pred.shape} target {target.shape} mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyBatch("every frame is masked")
    err = np.where(mask[..., None], pred - target, 0.0)
    return float(np.sum(err * err) / (n * pred.shape[-1]))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place Adam update of every parameter that has a gradient entry."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# training


def predict_items(model: InversionModel, items: Sequence[tuple], batch_size: int = 16):
    """Forward every (id, acoustic, target) item; returns {id: (raw, smoothed)}."""
    out = {}
    order = sorted(range(len(items)), key=lambda k: (items[k][1].shape[0], items[k][0]))
    for i in range(0, len(order), batch_size):
        batch = pad_batch([items[k] for k in order[i:i + batch_size]])
        raw, smoothed = forward_batch(model, batch.acoustic, batch.lengths)
        for b, uid in enumerate(batch.ids):
            L = batch.lengths[b]
            out[uid] = (raw[b, :L], smoothed[b, :L])
    return out


def _validation(model: InversionModel, items) -> tuple[float, float]:
    preds = predict_items(model, items)
    sq, n = 0.0, 0
    pccs = []
    for uid, _, y in items:
        s = preds[uid][1]
        sq += float(np.sum((s - y) ** 2))
        n += y.size
        pccs.append(metrics.channel_pcc(y, s))
    return sq / n, float(np.mean(pccs))


def train(cfg: ExperimentConfig, data: PreparedData,
          model: Optional[InversionModel] = None) -> tuple[InversionModel, TrainReport]:
    """Adam on masked MSE with early stopping; returns the best-validation model."""
    start = time.perf_counter()
    model = model or init_model(cfg.seed, cfg.smoother_mode, cfg.model)
    model.acoustic_stats = data.acoustic_stats
    model.target_stats = data.target_stats
    train_items = data.items(data.split.train)
    val_items = data.items(data.split.validation)
    if not train_items or not val_items:
        raise EmptyBatch("training needs non-empty train and validation sets")
    state = AdamState()
    report = TrainReport()
    best = model.copy()
    wait = 0
    for epoch in range(1, cfg.max_epochs + 1):
        total, frames = 0.0, 0
        for batch in make_batches(train_items, cfg.batch_size, cfg.seed, epoch):
            loss, grads = loss_and_gradients(model, batch.acoustic, batch.target, batch.mask)
            if not math.isfinite(loss):
                raise NumericalError(f"epoch {epoch}: non-finite training loss")
            try:
                optimizer_step(model.params, grads, state, cfg.learning_rate, cfg.betas, cfg.adam_eps)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}: {exc}") from None
            n = int(batch.mask.sum())
            total += loss * n
            frames += n
        val_loss, val_pcc = _validation(model, val_items)
        if not math.isfinite(val_loss):
            raise NumericalError(f"epoch {epoch}: non-finite validation loss")
        report.epochs.append(EpochRecord(epoch, total / frames, val_loss, val_pcc))
        log.info("epoch %d train %.5f val %.5f val_pcc %.4f", epoch, total / frames, val_loss, val_pcc)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = model.copy()
            wait = 0
        else:
            wait += 1
        report.stop_epoch = epoch
        if wait >= cfg.patience:
            report.early_stopped = True
            break
    best.meta = {"best_epoch": report.best_epoch, "stop_epoch": report.stop_epoch}
    report.wall_time = time.perf_counter() - start
    return best, report


@dataclass
class GridRow:
    mode: str
    batch: int
    smoother: str
    rmse_mm: float
    pcc: float
    stop_epoch: int
    error: str = ""


GRID_HEADER = ("mode", "batch", "smoother", "rmse_mm", "pcc", "stop_epoch")


def run_experiment(cfg: ExperimentConfig, corpora: Sequence[Corpus]):
    """Split, prepare, train and evaluate one configuration on its test partition."""
    split = make_split(corpora, cfg)
    data = prepare_data(corpora, split, cfg)
    model, report = train(cfg, data)
    ev = metrics.evaluate(model, data.items(data.split.test), data.target_stats,
                          meta={"mode": cfg.mode})
    return model, report, ev, data


def run_experiment_grid(cfgs: Sequence[ExperimentConfig], corpora: Sequence[Corpus]) -> list[GridRow]:
    """One row per config; failures are logged and recorded, the grid continues."""
    rows = []
    for cfg in cfgs:
        try:
            _, report, ev, _ = run_experiment(cfg, corpora)
            rows.append(GridRow(cfg.mode, cfg.batch_size, cfg.smoother_mode,
                                ev.mean_rmse, ev.mean_pcc, report.stop_epoch))
        except ArtinvError as exc:
            log.error("grid config %s failed: %s", cfg, exc)
            rows.append(GridRow(cfg.mode, cfg.batch_size, cfg.smoother_mode,
                                math.nan, math.nan, 0, str(exc)))
    return rows


def grid_csv(rows: Sequence[GridRow]) -> str:
    lines = [",".join(GRID_HEADER)]
    for r in rows:
        lines.append(f"{r.mode},{r.batch},{r.smoother},{r.rmse_mm!r},{r.pcc!r},{r.stop_epoch}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
