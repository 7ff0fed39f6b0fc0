"""Group-tied mixture-of-experts conv layer with size-balanced soft routing.

Each layer carries m expert convolutions (one per demographic group) and a
small router: 1x1 conv -> relu -> global average pool -> dense -> softmax.
Routing is hard-forward: exactly one expert runs per sample, chosen from
selection probabilities that reweight the router's confidence scores by
inverse group size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, dense, global_avg_pool


@dataclass(frozen=True)
class GroupStats:
    """Group sizes with derived priors and inverse-size balance weights."""

    sizes: np.ndarray
    priors: np.ndarray = field(init=False)
    alphas: np.ndarray = field(init=False)

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.float64)
        if sizes.ndim != 1 or len(sizes) < 1:
            raise ValueError("group sizes must be a non-empty 1-D array")
        if np.any(sizes <= 0):
            raise ValueError(f"all group sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "priors", sizes / sizes.sum())
        object.__setattr__(self, "alphas", 1.0 / sizes)

    @property
    def m(self):
        return len(self.sizes)

    @classmethod
    def from_labels(cls, groups, m):
        counts = np.bincount(np.asarray(groups, dtype=np.intp), minlength=m)
        return cls(counts)


@dataclass
class RoutingRecord:
    """One routing decision: raw router scores, balanced probabilities, choice."""

    sample_id: int
    layer_index: int
    mode: str
    chosen_expert: int
    scores: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        m = len(self.scores)
        if not (0 <= self.chosen_expert < m):
            raise ValueError(f"chosen expert {self.chosen_expert} out of range [0, {m})")
        for name, vec in (("scores", self.scores), ("probabilities", self.probabilities)):
            if abs(vec.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1, got {vec.sum()!r}")


class MoEConvLayer:
    """m identically-shaped expert convs plus a router over the layer input."""

    def __init__(self, layer_index, experts, router, stride, padding):
        self.layer_index = layer_index
        self.experts = experts  # list of (kernel, bias) Tensor pairs
        self.router = router  # (conv_kernel, conv_bias, dense_w, dense_b)
        self.stride = stride
        self.padding = padding
        shapes = {(e[0].shape, e[1].shape) for e in experts}
        if len(shapes) != 1:
            raise ValueError("experts of one layer must share kernel/bias shapes")
        if self.router_param_count() >= self.expert_param_count():
            raise ValueError(
                f"router has {self.router_param_count()} parameters, not smaller "
                f"than one expert's {self.expert_param_count()}"
            )
        if router[2].shape[1] != self.m or router[3].shape != (self.m,):
            raise ValueError("router head width must equal the expert count")

    @property
    def m(self):
        return len(self.experts)

    def expert_param_count(self):
        k, b = self.experts[0]
        return k.data.size + b.data.size

    def router_param_count(self):
        return sum(t.data.size for t in self.router)


def route_scores(x, layer):
    """Differentiable softmax router scores, shape (N, m)."""
    rk, rb, dw, db = layer.router
    h = conv2d(x, rk, rb, stride=1, padding=0).relu()
    logits = dense(global_avg_pool(h), dw, db)
    return logits.softmax(axis=1)


def selection_probabilities(scores, stats):
    """Balance router scores by inverse group size: p_k = a_k s_k / sum_j a_j s_j."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if s.shape[-1] != stats.m:
        raise ShapeError(f"score width {s.shape[-1]} != group count {stats.m}")
    if np.any(s < -1e-12):
        raise ValueError("scores must be nonnegative")
    if not isinstance(scores, Tensor):
        scores = Tensor(s)
    weighted = scores * Tensor(stats.alphas)
    denom = weighted.sum(axis=-1, keepdims=True)
    if np.any(denom.data <= 0):
        raise ValueError("all balanced scores vanished; cannot normalize")
    return weighted / denom


def select_expert(probabilities, mode, rng=None):
    """Pick an expert index: sample from the simplex, or argmax (low-index ties)."""
    p = np.asarray(probabilities, dtype=np.float64)
    if mode == "argmax":
        return int(np.argmax(p))
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs a random generator")
        return int(rng.choice(len(p), p=p / p.sum()))
    raise ValueError(f"unknown routing mode {mode!r}")


def moe_forward(x, layer, stats, mode, rng=None, sample_ids=None, groups=None):
    """Hard forward through one expert per sample.

    Returns (output, records, probs) where probs is the differentiable
    (N, m) selection-probability tensor feeding the specialization loss.
    In ``group`` mode the router is bypassed and the expert is the true
    group label; in ``mix`` mode outputs are blended by detached
    probabilities (ablation only).
    """
    n = x.data.shape[0]
    if sample_ids is None:
        sample_ids = list(range(n))
    scores = route_scores(x, layer)
    probs = selection_probabilities(scores, stats)

    if mode == "group":
        if groups is None:
            raise ValueError("group mode needs per-sample group labels")
        chosen = np.asarray(groups, dtype=np.intp)
    elif mode == "mix":
        chosen = np.argmax(probs.data, axis=1)
    else:
        chosen = np.array(
            [select_expert(probs.data[i], mode, rng) for i in range(n)], dtype=np.intp
        )

    if mode == "mix":
        out = None
        for k, (kern, bias) in enumerate(layer.experts):
            yk = conv2d(x, kern, bias, stride=layer.stride, padding=layer.padding)
            wk = yk * Tensor(probs.data[:, k][:, None, None, None])
            out = wk if out is None else out + wk
    else:
        out = None
        for k, (kern, bias) in enumerate(layer.experts):
            idx = np.flatnonzero(chosen == k)
            if idx.size == 0:
                continue
            yk = conv2d(x.take_rows(idx), kern, bias, stride=layer.stride, padding=layer.padding)
            part = yk.scatter_rows(idx, n)
            out = part if out is None else out + part

    records = [
        RoutingRecord(
            sample_id=sample_ids[i],
            layer_index=layer.layer_index,
            mode=mode,
            chosen_expert=int(chosen[i]),
            scores=scores.data[i].copy(),
            probabilities=probs.data[i].copy(),
        )
        for i in range(n)
    ]
    return out, records, probs
