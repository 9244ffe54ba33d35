"""Gradient-sign attacks: one-step, iterative, and momentum iterative.

All budgets in :class:`AttackConfig` are given on the 0..255 pixel scale and
converted to the [0, 1] domain used by the models.  Lower-level functions
(``one_step_attack``, ``clip_to_ball``) take budgets already in model units.

Attacks run on a batch: axis 0 indexes independent examples, and every norm,
normalization and projection is taken per example.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .tensor import batch_cosine, batch_l1, batch_l2, batch_linf, expand_to

PIXEL_SCALE = 255.0

METHODS = ("FGSM", "FGM", "I-FGSM", "I-FGM", "MI-FGSM", "MI-FGM")
ONE_STEP = {"FGSM": "linf", "FGM": "l2"}
NORMS = ("linf", "l2")
COUNTERPART = {"I-FGSM": "FGSM", "MI-FGSM": "FGSM", "I-FGM": "FGM", "MI-FGM": "FGM"}


class AttackError(RuntimeError):
    pass


def method_norm(method):
    return "l2" if method.endswith("FGM") else "linf"


def canonical_method(name):
    key = name.strip().upper().replace("_", "-")
    if key not in METHODS:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return key


def l2_budget(eps_per_pixel, input_dim):
    """L2 radius matching a per-pixel budget over ``input_dim`` pixels."""
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    return eps_per_pixel * math.sqrt(input_dim)


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters.

    ``epsilon`` and ``alpha`` are on the 0..255 scale.  ``alpha=None`` selects
    the ``eps/T`` step; a number selects a fixed step followed by projection
    onto the epsilon ball after each iteration.  For L2 methods both values
    are per-pixel and are scaled by ``sqrt(N)``.
    """

    method: str = "MI-FGSM"
    epsilon: float = 16.0
    iterations: int = 10
    mu: float = 1.0
    alpha: float = None
    target: int = None
    range_clip: bool = True
    grad_normalization: str = "l1"

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be a finite value >= 0, got {self.epsilon}")
        if self.method in ONE_STEP:
            # one-step methods are a single full-budget step
            object.__setattr__(self, "iterations", 1)
            object.__setattr__(self, "alpha", None)
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")
        object.__setattr__(self, "iterations", int(self.iterations))
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError(f"fixed step alpha must be > 0, got {self.alpha}")
        if self.grad_normalization not in ("l1", "l2"):
            raise ValueError("grad_normalization must be 'l1' or 'l2'")

    @property
    def norm(self):
        return method_norm(self.method)

    @property
    def momentum(self):
        return self.method.startswith("MI-")

    @property
    def targeted(self):
        return self.target is not None

    @property
    def step_rule(self):
        return "eps_over_t" if self.alpha is None else "fixed"

    def _to_model_units(self, value, input_dim):
        v = value / PIXEL_SCALE
        return l2_budget(v, input_dim) if self.norm == "l2" else v

    def radius(self, input_dim):
        return self._to_model_units(self.epsilon, input_dim)

    def step_size(self, input_dim):
        if self.alpha is None:
            return self.radius(input_dim) / self.iterations
        return self._to_model_units(self.alpha, input_dim)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return AttackConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d.update(norm=self.norm, step_rule=self.step_rule)
        return d


# ---------------------------------------------------------------------------
# gradient providers


class ModelGradient:
    """Adapts a single :class:`~miattack.nn.Model` to the gradient-source protocol.

    A gradient source is a callable ``(x_batch, labels) -> (losses, grads)``
    with a ``name`` and an ``input_shape``.
    """

    def __init__(self, model):
        self.model = model
        self.name = model.name
        self.input_shape = model.input_shape
        self.num_classes = model.num_classes

    def __call__(self, x, y):
        return nn.input_gradient(self.model, x, y)


def as_grad_source(source):
    if isinstance(source, nn.Model):
        return ModelGradient(source)
    return source


# ---------------------------------------------------------------------------
# primitives


def normalize_gradient(grad, normalization="l1", batched=False):
    """Scale ``grad`` to unit L1 (or L2) norm.

    Returns ``(direction, zero)``; where the norm is zero the direction is all
    zeros and ``zero`` is True.
    """
    grad = np.asarray(grad, dtype=np.float64)
    g = grad if batched else grad[None]
    norms = batch_l1(g) if normalization == "l1" else batch_l2(g)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    d = np.where(expand_to(zero, g), 0.0, g / expand_to(safe, g))
    return (d, zero) if batched else (d[0], bool(zero[0]))


def momentum_step(g, grad, mu, normalization="l1", batched=False):
    """Velocity update ``mu * g + grad / ||grad||``.

    A zero gradient contributes nothing, leaving ``mu * g``.
    """
    g = np.asarray(g, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if g.shape != grad.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {grad.shape}")
    d, _ = normalize_gradient(grad, normalization, batched)
    return mu * g + d


def _unit_l2(v):
    n = batch_l2(v)
    zero = n == 0.0
    safe = np.where(zero, 1.0, n)
    return np.where(expand_to(zero, v), 0.0, v / expand_to(safe, v))


def step_direction(g, norm, batched=True):
    """Sign of ``g`` for L-inf, ``g / ||g||_2`` for L2."""
    g = np.asarray(g, dtype=np.float64)
    if norm == "linf":
        return np.sign(g)
    return _unit_l2(g) if batched else _unit_l2(g[None])[0]


def clip_to_ball(x_star, x, epsilon, norm, batched=False):
    """Project ``x_star`` onto the ``epsilon`` ball around ``x``."""
    x_star = np.asarray(x_star, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_star.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_star.shape} vs {x.shape}")
    if norm == "linf":
        return np.clip(x_star, x - epsilon, x + epsilon)
    xs, xb = (x_star, x) if batched else (x_star[None], x[None])
    delta = xs - xb
    n = batch_l2(delta)
    scale = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
    out = np.where(expand_to(n > epsilon, xs), xb + delta * expand_to(scale, xs), xs)
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# tracing


@dataclass
class IterationRecord:
    loss: np.ndarray
    grad_l1: np.ndarray
    grad_l2: np.ndarray
    zero_grad: np.ndarray
    dist_linf: np.ndarray
    dist_l2: np.ndarray
    step_l2: np.ndarray
    cosine: np.ndarray = None  # None on the first iteration
    cosine_degenerate: np.ndarray = None
    step: np.ndarray = None


@dataclass
class AttackTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def stack(self, name):
        """``(T, B)`` array of one per-iteration statistic."""
        return np.stack([getattr(r, name) for r in self.records])

    def cosines(self):
        """``(T-1, B)`` cosine similarities between successive steps."""
        rows = [r.cosine for r in self.records[1:]]
        return np.stack(rows) if rows else np.zeros((0, len(self.records[0].loss)))

    def select(self, idx):
        """Trace restricted to the examples ``idx``."""
        def pick(v):
            return None if v is None else v[idx]
        return AttackTrace([IterationRecord(**{k: pick(v) for k, v in vars(r).items()})
                            for r in self.records])

    def summary(self):
        cos = self.cosines()
        last = self.records[-1]
        return {
            "iterations": len(self.records),
            "final_loss_mean": float(np.mean(last.loss)),
            "mean_cosine": float(np.mean(cos)) if cos.size else None,
            "mean_dist_linf": float(np.mean(last.dist_linf)),
            "mean_dist_l2": float(np.mean(last.dist_l2)),
            "zero_grad_iterations": int(sum(int(np.sum(r.zero_grad)) for r in self.records)),
            "degenerate_cosines": int(sum(int(np.sum(r.cosine_degenerate))
                                          for r in self.records[1:])),
        }

    @staticmethod
    def concat(traces):
        out = AttackTrace()
        for t, recs in enumerate(zip(*(tr.records for tr in traces))):
            fields = {}
            for k in vars(recs[0]):
                vals = [getattr(r, k) for r in recs]
                fields[k] = None if vals[0] is None else np.concatenate(vals)
            out.records.append(IterationRecord(**fields))
        return out


@dataclass
class AttackResult:
    x_adv: np.ndarray
    trace: AttackTrace
    source: str
    config: object
    x_orig: np.ndarray = None

    @property
    def perturbation(self):
        return self.x_adv - self.x_orig


# ---------------------------------------------------------------------------
# attacks


def _prepare(source, x, labels):
    x = np.asarray(x, dtype=np.float64)
    shape = tuple(getattr(source, "input_shape", x.shape[1:]))
    single = x.shape == shape
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if len(yb) == 1 and len(xb) > 1:
        yb = np.repeat(yb, len(xb))
    if len(yb) != len(xb):
        raise ValueError(f"{len(yb)} labels for {len(xb)} inputs")
    return xb, yb, single


def _check_loss(loss, t):
    if not np.all(np.isfinite(loss)):
        bad = np.flatnonzero(~np.isfinite(loss))
        raise AttackError(f"non-finite loss at iteration {t} for examples {bad.tolist()}")


def _apply(xs, direction, step, descend):
    return xs - step * direction if descend else xs + step * direction


def one_step_attack(grad_source, x, y, epsilon, norm, range_clip=True,
                    target=None, grad_normalization="l1"):
    """Single full-budget step: sign step for L-inf, unit-L2 step for L2.

    ``epsilon`` is in model units.  With ``target`` set the step descends on
    the target-class loss.  Returns an :class:`AttackResult`.
    """
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}")
    source = as_grad_source(grad_source)
    xb, yb, single = _prepare(source, x, y if target is None else target)
    loss, grad = source(xb, yb)
    _check_loss(loss, 0)
    d, zero = normalize_gradient(grad, grad_normalization, batched=True)
    direction = step_direction(d, norm)
    x_adv = _apply(xb, direction, epsilon, target is not None)
    if range_clip:
        x_adv = np.clip(x_adv, 0.0, 1.0)
    trace = AttackTrace([_record(loss, grad, zero, xb, xb, x_adv, None, False)])
    method = "FGSM" if norm == "linf" else "FGM"
    cfg = {"method": method, "epsilon_model_units": epsilon, "target": target,
           "range_clip": range_clip}
    return AttackResult(x_adv[0] if single else x_adv, trace,
                        getattr(source, "name", "source"), cfg, xb[0] if single else xb)


def _record(loss, grad, zero, x0, prev, new, prev_step, keep_steps):
    step = new - prev
    rec = IterationRecord(
        loss=np.asarray(loss, dtype=np.float64).copy(),
        grad_l1=batch_l1(grad), grad_l2=batch_l2(grad), zero_grad=np.asarray(zero),
        dist_linf=batch_linf(new - x0), dist_l2=batch_l2(new - x0),
        step_l2=batch_l2(step), step=step if keep_steps else None)
    if prev_step is not None:
        rec.cosine, rec.cosine_degenerate = batch_cosine(prev_step, step)
    return rec


def run_attack(grad_source, x, y, config, keep_steps=False, targets=None):
    """Run ``config.method`` from clean input(s) ``x`` with true label(s) ``y``.

    Each iteration queries the source at the current iterate, normalizes the
    gradient, folds it into the velocity (momentum methods) or uses it alone,
    and moves by the configured step.  Non-targeted attacks ascend the loss
    of ``y``; targeted attacks descend the loss of ``config.target``.  With a
    fixed step the iterate is projected onto the epsilon ball after every
    step; with ``range_clip`` it is then clipped to [0, 1].
    """
    if not isinstance(config, AttackConfig):
        raise TypeError("config must be an AttackConfig")
    source = as_grad_source(grad_source)
    descend = config.targeted or targets is not None
    if targets is not None:
        labels = targets
    else:
        labels = y if config.target is None else config.target
    xb, yb, single = _prepare(source, x, labels)
    n_classes = getattr(source, "num_classes", None)
    if n_classes is not None and descend and (yb.min() < 0 or yb.max() >= n_classes):
        raise ValueError(f"target class outside [0, {n_classes})")
    input_dim = int(np.prod(xb.shape[1:]))
    radius = config.radius(input_dim)
    alpha = config.step_size(input_dim)

    x0 = xb.copy()
    xs = xb.copy()
    g = np.zeros_like(xb)
    trace = AttackTrace()
    prev_step = None
    for t in range(config.iterations):
        loss, grad = source(xs, yb)
        _check_loss(loss, t)
        zero = batch_l1(grad) == 0.0
        if config.momentum:
            g = momentum_step(g, grad, config.mu, config.grad_normalization, batched=True)
        else:
            g, _ = normalize_gradient(grad, config.grad_normalization, batched=True)
        direction = step_direction(g, config.norm)
        new = _apply(xs, direction, alpha, descend)
        if config.step_rule == "fixed":
            new = clip_to_ball(new, x0, radius, config.norm, batched=True)
        if config.range_clip:
            new = np.clip(new, 0.0, 1.0)
        rec = _record(loss, grad, zero, x0, xs, new, prev_step, keep_steps)
        trace.records.append(rec)
        prev_step = new - xs
        xs = new

    return AttackResult(xs[0] if single else xs, trace, getattr(source, "name", "source"),
                        config, x0[0] if single else x0)

