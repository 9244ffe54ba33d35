"""Attacking several models at once by fusing their outputs.

Three places to combine K members with weights ``w_k`` (non-negative,
summing to one):

* ``logits``: cross-entropy of ``sum_k w_k * l_k(x)``
* ``predictions``: ``-log sum_k w_k * softmax(l_k(x))[y]``
* ``loss``: ``sum_k w_k * CE(l_k(x), y)``

:class:`EnsembleGradient` returns the fused loss and its exact input gradient
and plugs into :func:`miattack.attacks.run_attack` like a single model.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn

FUSIONS = ("logits", "predictions", "loss")


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    members: tuple
    weights: tuple = None
    fusion: str = "logits"

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("an ensemble needs at least one member")
        weights = self.weights
        if weights is None:
            weights = (1.0 / len(members),) * len(members)
        weights = tuple(float(w) for w in weights)
        if len(weights) != len(members):
            raise ValueError(f"{len(weights)} weights for {len(members)} members")
        if any(not np.isfinite(w) or w < 0 for w in weights):
            raise ValueError(f"weights must be finite and non-negative: {weights}")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 (got {sum(weights)!r})")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        first = members[0]
        for k, m in enumerate(members[1:], start=1):
            if m.input_shape != first.input_shape:
                raise ValueError(f"member {k} input shape {m.input_shape} != {first.input_shape}")
            if m.num_classes != first.num_classes:
                raise ValueError(f"member {k} has {m.num_classes} classes, "
                                 f"member 0 has {first.num_classes}")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "weights", weights)

    @property
    def input_shape(self):
        return self.members[0].input_shape

    @property
    def num_classes(self):
        return self.members[0].num_classes

    @property
    def name(self):
        return f"ens[{self.fusion}]({'+'.join(m.name for m in self.members)})"

    def with_fusion(self, fusion):
        return EnsembleSpec(self.members, self.weights, fusion)


def _member_logits(spec, x):
    outs = [nn.forward(m, x) for m in spec.members]
    shapes = {o.shape for o in outs}
    if len(shapes) != 1:
        raise ValueError(f"members produce logits of different shapes: {sorted(shapes)}")
    return outs


def fuse_logits(spec, x):
    """Weighted sum of member logits."""
    fused = None
    for w, l in zip(spec.weights, _member_logits(spec, x)):
        fused = w * l if fused is None else fused + w * l
    return fused


def fuse_predictions(spec, x):
    """Weighted average of member softmax outputs."""
    fused = None
    for w, l in zip(spec.weights, _member_logits(spec, x)):
        p = w * nn.softmax(l)
        fused = p if fused is None else fused + p
    return fused


def fuse_loss(spec, x, y):
    """Weighted sum of member cross-entropy losses."""
    fused = None
    for w, l in zip(spec.weights, _member_logits(spec, x)):
        j = w * np.asarray(nn.softmax_cross_entropy(l, y))
        fused = j if fused is None else fused + j
    return float(fused) if np.ndim(fused) == 0 else fused


def _log_fused_prob(log_w, member_log_sm_y):
    """``log sum_k w_k p_k[y]`` per row and the member responsibilities."""
    a = log_w[:, None] + member_log_sm_y  # K, B
    top = np.max(a, axis=0)
    shifted = np.exp(a - top)
    total = np.sum(shifted, axis=0)
    return top + np.log(total), shifted / total


def ensemble_gradient(spec, x, y):
    """Fused loss and its gradient with respect to ``x``.

    Accepts one example or a batch, mirroring :func:`miattack.nn.input_gradient`.
    """
    xb, single = nn._as_batch(spec.members[0], x)
    yb = nn._check_labels(np.atleast_1d(y), spec.num_classes)
    if len(yb) != len(xb):
        raise ValueError(f"{len(yb)} labels for {len(xb)} inputs")
    passes = [nn.logits_and_backprop(m, xb) for m in spec.members]
    if len({l.shape for l, _ in passes}) != 1:
        raise ValueError("members produce logits of different shapes")
    rows = np.arange(len(yb))
    w = spec.weights

    if spec.fusion == "logits":
        fused = None
        for wk, (l, _) in zip(w, passes):
            fused = wk * l if fused is None else fused + wk * l
        loss, dfused = nn.cross_entropy_grad(fused, yb)
        dlogits = [wk * dfused for wk in w]
    elif spec.fusion == "loss":
        loss, dlogits = None, []
        for wk, (l, _) in zip(w, passes):
            lk, dk = nn.cross_entropy_grad(l, yb)
            loss = wk * lk if loss is None else loss + wk * lk
            dlogits.append(wk * dk)
    else:
        lsm = [nn.log_softmax(l) for l, _ in passes]
        with np.errstate(divide="ignore"):
            log_w = np.log(np.asarray(w))
        log_p, resp = _log_fused_prob(log_w, np.stack([s[rows, yb] for s in lsm]))
        loss = -log_p
        # d(-log p_y)/d l_k = r_k * (softmax(l_k) - onehot(y))
        dlogits = []
        for k, s in enumerate(lsm):
            d = np.exp(s)
            d[rows, yb] -= 1.0
            dlogits.append(resp[k][:, None] * d)

    grad = None
    for dl, (_, backprop) in zip(dlogits, passes):
        gk = backprop(dl)
        grad = gk if grad is None else grad + gk
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


class EnsembleGradient:
    """Gradient source over an :class:`EnsembleSpec` for ``run_attack``."""

    def __init__(self, spec):
        self.spec = spec
        self.name = spec.name
        self.input_shape = spec.input_shape
        self.num_classes = spec.num_classes

    def __call__(self, x, y):
        return ensemble_gradient(self.spec, x, y)


def fused_predict(spec, x):
    """Class predicted by the fused ensemble (logits or probabilities)."""
    if spec.fusion == "predictions":
        out = fuse_predictions(spec, x)
    else:
        # summing losses has no output of its own; the logit fusion stands in
        out = fuse_logits(spec, x)
    return np.argmax(out, axis=-1)


def load_ensemble_config(path, load_model=nn.load_model):
    """Read ``{members: [...], weights: [...], fusion: ...}``.

    Member paths are resolved relative to the config file.
    """
    with open(path) as f:
        doc = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    members = []
    for p in doc["members"]:
        members.append(load_model(p if os.path.isabs(p) else os.path.join(base, p)))
    return EnsembleSpec(tuple(members), doc.get("weights"), doc.get("fusion", "logits"))
