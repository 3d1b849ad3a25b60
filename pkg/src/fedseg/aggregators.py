"""Server-side combination of client updates.

Three strategies are provided:

* ``mean`` - plain federated averaging of the client deltas.
* ``dpf`` - Gaussian-mechanism averaging: each delta is clipped to a fixed L2
  norm, the clipped deltas are averaged and Gaussian noise with standard
  deviation ``noise_multiplier * clip_norm / K`` is added.
* ``pqep`` - the same mechanism with a clip norm that adapts geometrically
  toward a target quantile of the client update norms:
  ``C <- C * exp(-lr * (fraction_unclipped - target_quantile))``.

Clipping and noise touch only the trainable tensors.  Batchnorm moving
statistics are averaged without clipping or noise, since a noised variance
can turn negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import make_rng
from .weights import ModelWeights

KINDS = ("mean", "dpf", "pqep")


@dataclass(frozen=True)
class ClientUpdate:
    """The only message a client sends to the server."""

    client_id: int
    delta: ModelWeights
    num_examples: int
    train_losses: tuple[float, ...] = ()


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "mean"
    weighted: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float = 0.5
    initial_clip: float = 0.1
    target_quantile: float = 0.5
    clip_learning_rate: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown aggregator {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "dpf" and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.kind in ("dpf", "pqep") and self.noise_multiplier < 0:
            raise ConfigError("noise_multiplier must be non-negative")
        if self.kind == "pqep":
            if not self.initial_clip > 0:
                raise ConfigError("initial_clip must be positive")
            if not 0 < self.target_quantile < 1:
                raise ConfigError("target_quantile must lie in (0, 1)")
            if not self.clip_learning_rate > 0:
                raise ConfigError("clip_learning_rate must be positive")


@dataclass
class AggregatorState:
    clip_norm: float
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: make_rng(0))
    history: list[float] = field(default_factory=list)


def flatten_norm(update: ClientUpdate | ModelWeights) -> float:
    """Global L2 norm over all trainable delta tensors."""
    delta = update.delta if isinstance(update, ClientUpdate) else update
    sq = math.fsum(float(np.dot(delta[n].ravel(), delta[n].ravel())) for n in delta.trainable_names())
    return math.sqrt(sq)


def clip(update: ClientUpdate, clip_norm: float) -> ClientUpdate:
    """Scale the trainable part of ``update`` down to ``clip_norm`` if larger."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    norm = flatten_norm(update)
    if norm <= clip_norm:
        return update
    factor = clip_norm / norm
    d = update.delta
    while True:
        scaled = ModelWeights({n: (a * factor if n in d.trainable else a) for n, a in d.items()}, d.trainable)
        # rounding can leave the result a hair above the bound; shrink until it is not,
        # which also makes a second clip a no-op
        if flatten_norm(scaled) <= clip_norm:
            return replace(update, delta=scaled)
        factor = np.nextafter(factor, 0.0)


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("no client updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    first = ups[0].delta
    for u in ups[1:]:
        first.check_compatible(u.delta)
    return ups


def aggregate_mean(updates: Sequence[ClientUpdate], weighted: bool = False) -> ModelWeights:
    """Element-wise mean of the deltas, reduced in ascending client id order.

    Computed as ``d0 + sum(c_i * (d_i - d0)) / sum(c_i)`` around the first
    delta, so K identical deltas average back to exactly that delta for any
    float64 values (a plain ``sum / K`` can be off by an ulp).
    """
    ups = _ordered(updates)
    if weighted:
        total = sum(u.num_examples for u in ups)
        if total <= 0:
            raise ValueError("weighted mean needs positive example counts")
        coeffs = [u.num_examples for u in ups]
    else:
        total = len(ups)
        coeffs = [1] * len(ups)
    ref = ups[0].delta
    out = {}
    for name in ref:
        base = np.asarray(ref[name], dtype=np.float64)
        acc = np.zeros(base.shape, dtype=np.float64)
        for c, u in zip(coeffs[1:], ups[1:]):
            diff = u.delta[name] - base
            acc += diff if c == 1 else c * diff
        out[name] = base + acc / total
    return ModelWeights(out, ref.trainable)


def _noise_std(multiplier: float, clip_norm: float, k: int) -> float:
    # multiplier 0 with an infinite clip means "no noise", not nan
    return 0.0 if multiplier == 0 else multiplier * clip_norm / k


def _add_noise(delta: ModelWeights, std: float, rng: np.random.Generator) -> ModelWeights:
    if not math.isfinite(std):
        raise ValueError("noise std must be finite; use a finite clip norm with noise")
    if std == 0:
        return delta
    out = {}
    for name, a in delta.items():
        if name in delta.trainable:
            out[name] = a + rng.normal(0.0, std, size=a.shape)
        else:
            out[name] = a
    return ModelWeights(out, delta.trainable)


def aggregate_dp(updates: Sequence[ClientUpdate], spec: AggregatorSpec, state: AggregatorState) -> ModelWeights:
    """Clip each update to ``spec.clip_norm``, average, add Gaussian noise."""
    ups = _ordered(updates)
    clipped = [clip(u, spec.clip_norm) for u in ups]
    mean = aggregate_mean(clipped, weighted=spec.weighted)
    state.step += 1
    return _add_noise(mean, _noise_std(spec.noise_multiplier, spec.clip_norm, len(ups)), state.rng)


def aggregate_adaptive_quantile(
    updates: Sequence[ClientUpdate], spec: AggregatorSpec, state: AggregatorState
) -> tuple[ModelWeights, AggregatorState]:
    """DP averaging at the current clip norm, then a geometric clip-norm step."""
    ups = _ordered(updates)
    c = state.clip_norm
    clipped = [clip(u, c) for u in ups]
    mean = aggregate_mean(clipped, weighted=spec.weighted)
    noised = _add_noise(mean, _noise_std(spec.noise_multiplier, c, len(ups)), state.rng)
    unclipped = sum(1 for u in ups if flatten_norm(u) <= c) / len(ups)
    state.clip_norm = c * math.exp(-spec.clip_learning_rate * (unclipped - spec.target_quantile))
    state.step += 1
    state.history.append(state.clip_norm)
    return noised, state


class Aggregator:
    """Stateful front end dispatching on ``spec.kind``."""

    def __init__(self, spec: AggregatorSpec):
        spec.validate()
        self.spec = spec
        initial = spec.initial_clip if spec.kind == "pqep" else spec.clip_norm
        self.state = AggregatorState(clip_norm=initial, rng=make_rng(spec.seed, 0xA66))

    def __call__(self, updates: Sequence[ClientUpdate]) -> ModelWeights:
        if self.spec.kind == "mean":
            return aggregate_mean(updates, weighted=self.spec.weighted)
        if self.spec.kind == "dpf":
            return aggregate_dp(updates, self.spec, self.state)
        delta, self.state = aggregate_adaptive_quantile(updates, self.spec, self.state)
        return delta


def check_delta_structure(delta: ModelWeights, reference: ModelWeights) -> None:
    if list(delta) != list(reference):
        raise ShapeError("aggregated delta names differ from the global model")
    reference.check_compatible(delta)
