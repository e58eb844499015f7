"""Online adaptation with entropy/PLPD sample selection and weighting.

Per test batch (infer, then adapt):

1. forward the batch and record predictions;
2. keep samples with entropy below ``tau_ent`` (if enabled);
3. transform the survivors and forward them again without gradients;
4. keep survivors whose PLPD exceeds ``tau_plpd`` (if enabled);
5. weight each kept sample by exp(-(Ent - Ent0)) and/or exp(PLPD);
6. take one SGD step on sum(alpha * Ent) / |kept| w.r.t. the norm affine
   parameters.

With every selection and weighting flag off this is Tent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError
from .metrics import EvalRecords, area_labels
from .model import Counters, Model, Predictions, batch_stats, forward, grad_adapt_params, sgd_step
from .numerics import make_rng
from .transforms import TransformSpec, apply_transform

FLAG_NAMES = ("use_ent_select", "use_plpd_select", "use_ent_weight", "use_plpd_weight")


@dataclass
class AdaptConfig:
    num_classes: int = 2
    tau_ent: float | None = None
    tau_plpd: float = 0.2
    ent0: float | None = None
    transform: TransformSpec = field(default_factory=TransformSpec)
    lr: float = 0.0025
    momentum: float = 0.9
    use_ent_select: bool = True
    use_plpd_select: bool = True
    use_ent_weight: bool = True
    use_plpd_weight: bool = True

    def __post_init__(self):
        ln_c = math.log(self.num_classes)
        if self.tau_ent is None:
            self.tau_ent = 0.5 * ln_c
        if self.ent0 is None:
            self.ent0 = 0.4 * ln_c
        if not 0.0 < self.tau_ent <= ln_c + 1e-12:
            raise ConfigurationError(f"tau_ent must lie in (0, ln C] = (0, {ln_c:.4f}]")
        for name in ("tau_plpd", "ent0", "lr", "momentum"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")

    @classmethod
    def tent(cls, num_classes=2, **kw):
        return cls(num_classes=num_classes, **dict.fromkeys(FLAG_NAMES, False), **kw)

    @classmethod
    def biased(cls, num_classes=2, **kw):
        """ColoredMNIST setting: no entropy filter, Ent0 = ln C, tau_plpd = 0.5."""
        kw.setdefault("tau_plpd", 0.5)
        kw.setdefault("ent0", math.log(num_classes))
        kw.setdefault("use_ent_select", False)
        return cls(num_classes=num_classes, **kw)

    @property
    def flags(self):
        return tuple(getattr(self, f) for f in FLAG_NAMES)

    def with_flags(self, ent_select, plpd_select, ent_weight, plpd_weight):
        return replace(
            self,
            use_ent_select=ent_select,
            use_plpd_select=plpd_select,
            use_ent_weight=ent_weight,
            use_plpd_weight=plpd_weight,
        )

    @property
    def needs_plpd(self):
        return self.use_plpd_select or self.use_plpd_weight


def plpd(pred_x, pred_xp) -> np.ndarray:
    """Drop in the pseudo-label's probability after the transform.

    The pseudo-label is the argmax of ``pred_x``.  Accepts ``Predictions``
    or probability arrays of shape (N, C) or (C,).
    """
    p = pred_x.probs if isinstance(pred_x, Predictions) else np.asarray(pred_x, dtype=np.float64)
    q = pred_xp.probs if isinstance(pred_xp, Predictions) else np.asarray(pred_xp, dtype=np.float64)
    if p.ndim == 1:
        k = int(np.argmax(p))
        return float(p[k] - q[k])
    k = np.argmax(p, axis=1)
    rows = np.arange(len(p))
    return p[rows, k] - q[rows, k]


def select(entropy, plpd_value, cfg: AdaptConfig):
    """True where every enabled criterion passes; NaN PLPD never passes."""
    entropy = np.asarray(entropy, dtype=np.float64)
    keep = np.ones(entropy.shape, dtype=bool)
    if cfg.use_ent_select:
        keep &= entropy < cfg.tau_ent
    if cfg.use_plpd_select:
        with np.errstate(invalid="ignore"):
            keep &= np.asarray(plpd_value, dtype=np.float64) > cfg.tau_plpd
    return keep[()] if keep.ndim == 0 else keep


def weight(entropy, plpd_value, cfg: AdaptConfig):
    """Sample weight; 1 when both weighting terms are disabled."""
    entropy = np.asarray(entropy, dtype=np.float64)
    if not (cfg.use_ent_weight or cfg.use_plpd_weight):
        alpha = np.ones_like(entropy)
    else:
        alpha = np.zeros_like(entropy)
        if cfg.use_ent_weight:
            alpha = alpha + np.exp(-(entropy - cfg.ent0))
        if cfg.use_plpd_weight:
            alpha = alpha + np.exp(np.asarray(plpd_value, dtype=np.float64))
    return alpha[()] if alpha.ndim == 0 else alpha


@dataclass
class BatchDiagnostics:
    """Per-sample diagnostics for one batch (``plpd`` is NaN where it was not computed)."""

    entropy: np.ndarray
    plpd: np.ndarray
    selected: np.ndarray
    weight: np.ndarray
    pseudo_label: np.ndarray
    label: np.ndarray
    group: np.ndarray
    area: np.ndarray
    indices: np.ndarray
    survivors: int
    selected_count: int

    @property
    def correct(self):
        return self.pseudo_label == self.label

    def __len__(self):
        return len(self.label)


def _aux_forward(model, x_main, x_aux):
    # a lone survivor cannot provide batch-norm statistics; borrow the main batch's
    stats = None
    if model.norm.kind == "batch" and len(x_aux) < 2:
        stats = batch_stats(model, x_main)
    return forward(model, x_aux, stats=stats)


def adapt_batch(model: Model, batch, cfg: AdaptConfig, rng, counters: Counters | None = None,
                update: bool = True) -> BatchDiagnostics:
    """Predict ``batch`` with the current model, then adapt it in place.

    The returned predictions are the pre-update ones.  With ``update=False``
    only the inference half runs (frozen-model evaluation).
    """
    if counters is None:
        counters = Counters()
    x = batch.x
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    pred = forward(model, x, counters)
    ent = pred.entropy
    plpd_values = np.full(n, np.nan)
    if not update:
        survivors = np.zeros(n, dtype=bool)
        selected = survivors
        alpha = np.zeros(n)
    else:
        survivors = ent < cfg.tau_ent if cfg.use_ent_select else np.ones(n, dtype=bool)
        idx = np.flatnonzero(survivors)
        if cfg.needs_plpd and len(idx):
            x_t = apply_transform(x[idx], cfg.transform, rng)
            pred_t = _aux_forward(model, x, x_t)
            counters.forwards_aux += len(idx)
            plpd_values[idx] = plpd(pred.probs[idx], pred_t.probs)
        selected = survivors & select(ent, plpd_values, cfg)
        alpha = np.where(selected, weight(ent, plpd_values, cfg), 0.0)
        count = int(selected.sum())
        if count:
            grads = grad_adapt_params(model, x, alpha, denom=count)
            sgd_step(model, grads, cfg.lr, cfg.momentum)
            counters.backwards += count
            counters.selected += count
    return BatchDiagnostics(
        entropy=ent,
        plpd=plpd_values,
        selected=selected,
        weight=alpha,
        pseudo_label=pred.pseudo_labels,
        label=np.asarray(batch.labels),
        group=np.asarray(batch.groups),
        area=area_labels(ent, plpd_values, cfg.tau_ent, cfg.tau_plpd),
        indices=np.asarray(batch.indices) if batch.indices is not None else np.arange(n),
        survivors=int(survivors.sum()),
        selected_count=int(selected.sum()),
    )


@dataclass
class RunResult:
    label: str
    batches: list
    counters: Counters

    def _cat(self, name):
        if not self.batches:
            return np.array([])
        return np.concatenate([getattr(b, name) for b in self.batches])

    @property
    def correct(self):
        return self._cat("pseudo_label") == self._cat("label")

    @property
    def accuracy(self):
        return float(self.correct.mean()) if self.batches else float("nan")

    def records(self) -> EvalRecords:
        return EvalRecords(
            entropy=self._cat("entropy"),
            plpd=self._cat("plpd"),
            correct=self.correct,
            group=self._cat("group"),
        )

    def rows(self):
        """One dict per processed sample, in stream order."""
        for b_idx, b in enumerate(self.batches):
            for i in range(len(b)):
                yield {
                    "batch_idx": b_idx,
                    "sample_idx": int(b.indices[i]),
                    "entropy": float(b.entropy[i]),
                    "plpd": float(b.plpd[i]),
                    "selected": int(b.selected[i]),
                    "weight": float(b.weight[i]),
                    "pred": int(b.pseudo_label[i]),
                    "label": int(b.label[i]),
                    "group": int(b.group[i]),
                    "area": int(b.area[i]),
                }


def run_stream(model: Model, stream, cfg: AdaptConfig | None, seed: int = 0, adapt: bool = True,
               reset: bool = True, label: str = "") -> RunResult:
    """Infer-then-adapt over ``stream`` in order.

    ``adapt=False`` (or ``cfg=None``) evaluates the frozen model.  With
    ``reset`` the model is restored to its state at entry once the stream ends.
    """
    if cfg is None:
        adapt = False
        cfg = AdaptConfig(num_classes=model.num_classes)
    rng = make_rng(seed)
    counters = Counters()
    if reset:
        model.snapshot()
    batches = [adapt_batch(model, b, cfg, rng, counters, update=adapt) for b in stream]
    if reset:
        model.reset()
    return RunResult(label or config_label(cfg, adapt), batches, counters)


def config_label(cfg: AdaptConfig, adapt=True) -> str:
    if not adapt:
        return "No adapt"
    flags = cfg.flags
    row = 1 + sum(bit << (3 - i) for i, bit in enumerate(flags))
    if row == 1:
        return "(1) Tent"
    if row == 16:
        return "(16) DeYO"
    sel = [n for n, on in zip(("Ent", "PLPD"), flags[:2]) if on]
    wt = [n for n, on in zip(("Ent", "PLPD"), flags[2:]) if on]
    return f"({row}) S=[{'+'.join(sel)}] alpha=[{'+'.join(wt)}]"


def ablation_configs(base: AdaptConfig):
    """The 16 flag combinations ordered as Table-5 rows (1) Tent ... (16) DeYO."""
    cells = []
    for row in range(16):
        bits = [(row >> (3 - i)) & 1 == 1 for i in range(4)]
        cells.append(base.with_flags(*bits))
    return cells


def ablation_grid(model: Model, stream, base: AdaptConfig, seed: int = 0) -> list[RunResult]:
    """Run every selection/weighting combination from the same starting model and seed."""
    return [run_stream(model, stream, cfg, seed=seed, reset=True) for cfg in ablation_configs(base)]


def evaluate_confidence(model: Model, stream, transform: TransformSpec, seed: int = 0) -> EvalRecords:
    """Entropy and PLPD of the frozen model for every sample of ``stream``."""
    rng = make_rng(seed)
    parts = []
    for b in stream:
        pred = forward(model, b.x)
        pred_t = _aux_forward(model, b.x, apply_transform(b.x, transform, rng))
        parts.append((pred.entropy, plpd(pred, pred_t), pred.pseudo_labels == b.labels, b.groups))
    return EvalRecords(*(np.concatenate(col) for col in zip(*parts)))
