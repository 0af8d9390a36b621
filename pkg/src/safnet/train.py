"""Adversarial training: the three-term objective, Adam, LR scheduling,
early stopping, the fit loop, and the lambda grid search.

The total loss is

    L_total = L_task + lambda_mi * L_MI + lambda_grl * L_domain

where L_task and L_domain are mean cross-entropies of the task and domain
heads, and L_MI is the mean Shannon entropy of the domain-head softmax.
The domain branch (both its cross-entropy and the entropy term) is routed
through the gradient reversal layer, which multiplies the backward signal
into the encoder by -lambda_grl. Because the reversal layer already
carries that factor, the lambda_grl weighting of the domain term enters
the total value-only (scale_value_only) -- scaling its gradient as well
would square the factor on the encoder path. The domain head therefore
trains on plain, unscaled cross-entropy while the encoder receives the
reversed, scaled gradient, and the reported L_total still equals the
weighted sum above with lambda_grl multiplying L_domain.

Routing the entropy term through the reversal layer means the encoder is
pushed to *maximize* domain-posterior entropy (an uninformative subject
posterior, i.e. low mutual information between features and subject)
while the head stays confident. Setting ``LossWeights.literal_mi_sign``
instead evaluates the entropy on a parallel branch that bypasses the
reversal layer, so every parameter descends the entropy term as written;
this sharpens domain predictions and exists for comparison only.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .datamodel import Epoch, EpochSet
from .errors import ValidationError
from .isbcs import SwapConfig, isbcs_augment_batch
from .metrics import confusion, macro_metrics
from .model import EncoderConfig, SafModel
from .textio import write_csv

TRAIN_LOG_HEADER = ["epoch", "l_task", "l_domain", "l_mi", "l_total", "lr",
                    "val_macro_acc"]
GRID_TABLE_HEADER = ["lambda_mi", "lambda_grl", "val_macro_acc"]


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the entropy and adversarial terms."""

    lambda_mi: float = 0.0
    lambda_grl: float = 0.0
    literal_mi_sign: bool = False

    def __post_init__(self):
        for name in ("lambda_mi", "lambda_grl"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    min_epochs: int = 20
    max_epochs: int = 200
    patience: int = 10
    plateau_window: int = 5
    improvement_eps: float = 0.001
    lr_factor: float = 0.5
    lr_floor: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    swap: SwapConfig = field(default_factory=SwapConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValidationError("lr_factor must be in (0, 1)")
        if self.lr_floor <= 0:
            raise ValidationError("lr_floor must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.min_epochs < 1 or self.max_epochs < self.min_epochs:
            raise ValidationError("need 1 <= min_epochs <= max_epochs")
        if self.patience < 1 or self.plateau_window < 1:
            raise ValidationError("patience and plateau_window must be >= 1")
        if self.improvement_eps < 0:
            raise ValidationError("improvement_eps must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ValidationError("adam_eps must be positive")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_task: float
    l_domain: float
    l_mi: float
    l_total: float
    lr: float
    val_macro_acc: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def val_accuracies(self) -> list[float]:
        return [r.val_macro_acc for r in self.records]


def write_train_log(log: TrainLog, path: str) -> None:
    rows = [(r.epoch, r.l_task, r.l_domain, r.l_mi, r.l_total, r.lr,
             r.val_macro_acc) for r in log.records]
    write_csv(path, TRAIN_LOG_HEADER, rows)


def _domain_head(model: SafModel, zin: ad.Tensor) -> ad.Tensor:
    p = model.params
    hidden = ad.elu(ad.linear(zin, p["dom1_w"], p["dom1_b"]))
    return ad.linear(hidden, p["dom2_w"], p["dom2_b"])


def compute_losses(x, y, subject_index, model: SafModel, weights: LossWeights,
                   mode: str = "train", rng=None):
    """Forward pass and the three loss terms on one batch.

    x is (B, C, M) or (B, 1, C, M); y are class labels; subject_index are
    integer domain targets below model.num_domains. Returns scalar tensors
    (l_task, l_domain, l_mi, l_total); call .backward() on l_total to
    populate parameter gradients.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None, :, :]
    s = np.asarray(subject_index, dtype=np.int64)
    if s.size and (s.min() < 0 or s.max() >= model.num_domains):
        raise ValidationError(
            f"subject indices must be in [0, {model.num_domains}), "
            f"got range [{s.min()}, {s.max()}]")

    z = model.encoder_forward(x, mode=mode, rng=rng)
    task_logits, domain_logits = model.heads_forward(
        z, lambda_grl=weights.lambda_grl)
    l_task = ad.softmax_cross_entropy(task_logits, np.asarray(y))
    l_domain = ad.softmax_cross_entropy(domain_logits, s)
    if weights.literal_mi_sign:
        l_mi = ad.entropy_of_softmax(_domain_head(model, z))
    else:
        l_mi = ad.entropy_of_softmax(domain_logits)
    l_total = l_task + ad.Tensor(np.asarray(weights.lambda_mi,
                                            dtype=l_mi.data.dtype)) * l_mi
    l_total = l_total + ad.scale_value_only(l_domain, weights.lambda_grl)
    return l_task, l_domain, l_mi, l_total


class AdamState:
    """First/second moment estimates and the shared step counter."""

    def __init__(self, params: dict[str, ad.Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, ad.Tensor], state: AdamState, lr: float) -> None:
    """One in-place Adam update; a parameter with grad None sees zero gradient."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        if name not in state.m:
            raise ValidationError(f"optimizer state missing parameter {name!r}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValidationError(
                f"gradient shape {g.shape} does not match {name} {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def _tail_stagnation(history, eps: float) -> int:
    """Consecutive epochs at the end of history that failed to beat the
    running best by more than eps."""
    best = -np.inf
    stagnant = 0
    for v in history:
        if v > best + eps:
            stagnant = 0
        else:
            stagnant += 1
        if v > best:
            best = v
    return stagnant


@dataclass
class SchedulerState:
    lr: float


def scheduler_update(history, state: SchedulerState, cfg: TrainConfig) -> float:
    """Halve the learning rate (down to lr_floor) each time the monitored
    metric goes plateau_window consecutive epochs without improving on the
    best-so-far by more than improvement_eps. Call once per epoch, after
    appending that epoch's value to history."""
    if len(history) == 0:
        raise ValidationError("scheduler needs at least one recorded epoch")
    stagnant = _tail_stagnation(history, cfg.improvement_eps)
    if stagnant > 0 and stagnant % cfg.plateau_window == 0:
        state.lr = max(state.lr * cfg.lr_factor, cfg.lr_floor)
    return state.lr


def early_stop_check(history, cfg: TrainConfig) -> bool:
    """True once at least min_epochs have run and the last patience epochs
    all failed to improve on the best by more than improvement_eps."""
    if len(history) < cfg.min_epochs:
        return False
    return _tail_stagnation(history, cfg.improvement_eps) >= cfg.patience


def _as_epochs(data) -> list[Epoch]:
    if isinstance(data, EpochSet):
        return list(data.epochs)
    return list(data)


def _batch_arrays(epochs: list[Epoch], subject_map: dict[str, int]):
    x = np.stack([ep.x for ep in epochs])[:, None, :, :]
    y = np.array([ep.y for ep in epochs], dtype=np.int64)
    s = np.array([subject_map[ep.s] for ep in epochs], dtype=np.int64)
    return x, y, s


def evaluate_macro_accuracy(model: SafModel, epochs: list[Epoch],
                            batch_size: int = 256) -> float:
    """Task-head macro-accuracy over the given epochs, eval mode."""
    if not epochs:
        raise ValidationError("cannot evaluate an empty epoch list")
    preds = []
    for start in range(0, len(epochs), batch_size):
        chunk = epochs[start:start + batch_size]
        x = np.stack([ep.x for ep in chunk])[:, None, :, :]
        preds.extend(model.predict(x).tolist())
    y_true = [ep.y for ep in epochs]
    return macro_metrics(confusion(y_true, preds))[0]


def _snapshot(model: SafModel):
    return ({k: p.data.copy() for k, p in model.params.items()},
            {k: b.copy() for k, b in model.buffers.items()})


def _restore(model: SafModel, snap) -> None:
    params, buffers = snap
    for k, v in params.items():
        model.params[k].data[...] = v
    for k, v in buffers.items():
        model.buffers[k][...] = v


def fit(train_data, val_data, model: SafModel, cfg: TrainConfig,
        weights: LossWeights) -> tuple[SafModel, TrainLog]:
    """Train the model, monitor validation macro-accuracy, and return the
    model restored to its best epoch together with the per-epoch log.

    Three independent RNG streams are derived from cfg.seed (in order:
    batch shuffling, channel-swap augmentation, dropout), so a run with
    swap probability 0 and both lambdas 0 follows the exact parameter
    trajectory of a plain classifier loop that never touches the swap
    stream. The model is updated in place.
    """
    train_epochs = _as_epochs(train_data)
    val_epochs = _as_epochs(val_data)
    if not train_epochs or not val_epochs:
        raise ValidationError("train and validation sets must be non-empty")

    subjects = sorted({ep.s for ep in train_epochs})
    subject_map = {s: i for i, s in enumerate(subjects)}
    if model.num_domains != len(subjects):
        raise ValidationError(
            f"model has {model.num_domains} domain outputs but the training "
            f"set has {len(subjects)} subjects")
    if len(subjects) < 2 and weights.lambda_grl > 0:
        warnings.warn(
            "adversarial term is active but the training set has a single "
            "subject; the domain task is degenerate", RuntimeWarning,
            stacklevel=2)

    shuffle_ss, swap_ss, dropout_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    swap_rng = np.random.default_rng(swap_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    adam = AdamState(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = SchedulerState(lr=cfg.lr)
    log = TrainLog()
    history: list[float] = []
    best_acc = -np.inf
    best_snap = _snapshot(model)
    best_epoch = 0

    n = len(train_epochs)
    for epoch in range(1, cfg.max_epochs + 1):
        lr_used = sched.lr
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        seen = 0
        for start in range(0, n, cfg.batch_size):
            batch = [train_epochs[i] for i in order[start:start + cfg.batch_size]]
            batch, _ = isbcs_augment_batch(batch, cfg.swap, swap_rng)
            x, y, s = _batch_arrays(batch, subject_map)
            model.zero_grad()
            l_task, l_domain, l_mi, l_total = compute_losses(
                x, y, s, model, weights, mode="train", rng=dropout_rng)
            l_total.backward()
            adam_step(model.params, adam, lr_used)
            b = len(batch)
            sums += b * np.array([float(l_task.data), float(l_domain.data),
                                  float(l_mi.data), float(l_total.data)])
            seen += b

        val_acc = evaluate_macro_accuracy(model, val_epochs)
        history.append(val_acc)
        means = sums / seen
        log.records.append(EpochRecord(
            epoch=epoch, l_task=means[0], l_domain=means[1], l_mi=means[2],
            l_total=means[3], lr=lr_used, val_macro_acc=val_acc))

        if val_acc > best_acc:
            best_acc = val_acc
            best_snap = _snapshot(model)
            best_epoch = epoch

        scheduler_update(history, sched, cfg)
        if early_stop_check(history, cfg):
            log.stop_reason = "early_stop"
            break
    else:
        log.stop_reason = "max_epochs"

    log.best_epoch = best_epoch
    _restore(model, best_snap)
    return model, log


def make_lambda_grid(lo: float = 0.001, hi: float = 10.0, n: int = 10) -> list[float]:
    """n uniformly spaced values including both endpoints."""
    if n < 2:
        raise ValidationError(f"grid needs at least 2 points, got {n}")
    if not lo < hi:
        raise ValidationError("grid lower bound must be below upper bound")
    return [float(v) for v in np.linspace(lo, hi, n)]


def _grid_cell(args):
    (i, j, lam_mi, lam_grl, train_epochs, val_epochs, enc_cfg, cell_cfg,
     num_domains, model_seed) = args
    model = SafModel(enc_cfg, num_domains=num_domains, grl_lambda=lam_grl,
                     seed=model_seed)
    _, log = fit(train_epochs, val_epochs, model, cell_cfg,
                 LossWeights(lambda_mi=lam_mi, lambda_grl=lam_grl))
    return i, j, max(log.val_accuracies)


def grid_search(train_data, val_data, enc_cfg: EncoderConfig, cfg: TrainConfig,
                n_mi: int = 25, n_grl: int = 10, budget_epochs: int = 40,
                jobs: int = 1):
    """Train one model per (lambda_mi, lambda_grl) grid cell under a reduced
    epoch budget and pick the cell with the best validation macro-accuracy;
    ties prefer smaller lambda_grl, then smaller lambda_mi.

    Returns (best LossWeights, rows of (lambda_mi, lambda_grl, val_macro_acc)
    ordered by (lambda_mi, lambda_grl)). Cells are independent; jobs > 1
    runs them in separate processes, each cell seeded from (cfg.seed, i, j).
    """
    grid_mi = make_lambda_grid(n=n_mi)
    grid_grl = make_lambda_grid(n=n_grl)
    train_epochs = _as_epochs(train_data)
    val_epochs = _as_epochs(val_data)
    num_domains = len({ep.s for ep in train_epochs})

    tasks = []
    for i, lam_mi in enumerate(grid_mi):
        for j, lam_grl in enumerate(grid_grl):
            state = np.random.SeedSequence([cfg.seed, i, j]).generate_state(2)
            cell_cfg = replace(cfg, max_epochs=budget_epochs,
                               min_epochs=min(cfg.min_epochs, budget_epochs),
                               seed=int(state[0]))
            tasks.append((i, j, lam_mi, lam_grl, train_epochs, val_epochs,
                          enc_cfg, cell_cfg, num_domains, int(state[1])))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_cell, tasks))
    else:
        results = [_grid_cell(t) for t in tasks]

    acc = {(i, j): v for i, j, v in results}
    rows = [(lam_mi, lam_grl, acc[(i, j)])
            for i, lam_mi in enumerate(grid_mi)
            for j, lam_grl in enumerate(grid_grl)]

    best = None
    for i, lam_mi in enumerate(grid_mi):
        for j, lam_grl in enumerate(grid_grl):
            cand = (acc[(i, j)], lam_grl, lam_mi)
            if best is None or (cand[0], -cand[1], -cand[2]) > \
                    (best[0], -best[1], -best[2]):
                best = cand
    weights = LossWeights(lambda_mi=best[2], lambda_grl=best[1])
    return weights, rows


def write_grid_table(rows, path: str) -> None:
    write_csv(path, GRID_TABLE_HEADER, rows)
