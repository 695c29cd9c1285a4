"""Distance-to-weight mappings for sample-wise model ensembling.

Four designs, all returning the fine-tuned model's weight in [0, 1]:

    sigmoid   1 / (1 + exp((d - a) / b))        smooth switch at d = a
    linear    clamp_[0,1](-b * (d - a))         piecewise-linear switch
    binary    1 if d < a else 0                 hard switch
    constant  alpha, ignoring the distance      classic fixed-mix baseline

Distances are clamped to [0, 2] before weighting -- accumulated float
error can push a computed distance a hair past 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

VARIANTS = ("sigmoid", "linear", "binary", "constant")


@dataclass(frozen=True)
class WeightFunction:
    variant: str
    a: float | None = None
    b: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown weight variant {self.variant!r}")
        if self.variant in ("sigmoid", "linear"):
            if self.a is None or self.b is None:
                raise ValidationError(f"{self.variant} weight needs both a and b")
            if not self.b > 0:
                raise ValidationError(f"b must be positive, got {self.b}")
        elif self.variant == "binary":
            if self.a is None:
                raise ValidationError("binary weight needs a")
        else:
            if self.alpha is None or not (0.0 <= self.alpha <= 1.0):
                raise ValidationError(f"alpha must be in [0, 1], got {self.alpha}")

    @classmethod
    def sigmoid(cls, a, b):
        return cls("sigmoid", a=float(a), b=float(b))

    @classmethod
    def linear(cls, a, b):
        return cls("linear", a=float(a), b=float(b))

    @classmethod
    def binary(cls, a):
        return cls("binary", a=float(a))

    @classmethod
    def constant(cls, alpha):
        return cls("constant", alpha=float(alpha))

    def to_dict(self):
        if self.variant == "constant":
            return {"variant": "constant", "alpha": self.alpha}
        if self.variant == "binary":
            return {"variant": "binary", "a": self.a}
        return {"variant": self.variant, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d):
        try:
            variant = d["variant"]
        except (KeyError, TypeError) as e:
            raise ValidationError(f"weight function dict missing variant: {d!r}") from e
        if variant == "constant":
            return cls.constant(d["alpha"])
        if variant == "binary":
            return cls.binary(d["a"])
        if variant in ("sigmoid", "linear"):
            return cls(variant, a=float(d["a"]), b=float(d["b"]))
        raise ValidationError(f"unknown weight variant {variant!r}")

    def describe(self):
        d = self.to_dict()
        params = ",".join(f"{k}={v:g}" for k, v in d.items() if k != "variant")
        return f"{self.variant}:{params}"


def parse_weight_spec(spec) -> WeightFunction:
    """Parse the CLI form ``kind:key=val,key=val``, e.g. ``sigmoid:a=1.5,b=0.6``."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    params = {}
    if rest.strip():
        for item in rest.split(","):
            key, sep, val = item.partition("=")
            if not sep:
                raise ValidationError(f"bad weight parameter {item!r} in {spec!r}")
            try:
                params[key.strip()] = float(val)
            except ValueError as e:
                raise ValidationError(f"bad weight parameter {item!r} in {spec!r}") from e
    try:
        if kind == "constant":
            return WeightFunction.constant(params["alpha"])
        if kind == "binary":
            return WeightFunction.binary(params["a"])
        if kind in ("sigmoid", "linear"):
            return WeightFunction(kind, a=params["a"], b=params["b"])
    except KeyError as e:
        raise ValidationError(f"weight spec {spec!r} is missing parameter {e}") from e
    raise ValidationError(f"unknown weight kind {kind!r} in {spec!r}")


def _stable_sigmoid(x):
    # exp() only ever sees non-positive arguments.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def weight_batch(fn: WeightFunction, distances):
    """Elementwise ensemble weight for an array of distances."""
    d = np.asarray(distances, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValidationError("distances contain NaN or Inf")
    d = np.clip(d, 0.0, 2.0)
    if fn.variant == "constant":
        return np.full(d.shape, fn.alpha, dtype=np.float64)
    if fn.variant == "binary":
        return (d < fn.a).astype(np.float64)
    if fn.variant == "linear":
        return np.clip(-fn.b * (d - fn.a), 0.0, 1.0)
    return _stable_sigmoid(-(d - fn.a) / fn.b)


def weight(fn: WeightFunction, d):
    """Scalar ensemble weight; same arithmetic as the batch form."""
    return float(weight_batch(fn, np.asarray([d]))[0])


def _tenths(lo, hi):
    return [round(i / 10.0, 10) for i in range(lo, hi + 1)]

DEFAULT_A_GRID = _tenths(1, 19)    # 0.1 .. 1.9
DEFAULT_B_GRID = _tenths(1, 20)    # 0.1 .. 2.0
DEFAULT_ALPHA_GRID = _tenths(0, 10)  # 0.0 .. 1.0


def sweep_grid(kind, a_values=None, b_values=None, alphas=None):
    """Hyperparameter grid for one weight-function family.

    Defaults: 11 constants, 19 binary offsets, and a 19 x 20 (a, b) grid
    for sigmoid/linear. Any range can be overridden; an empty range
    yields an empty grid.
    """
    if kind == "constant":
        values = DEFAULT_ALPHA_GRID if alphas is None else list(alphas)
        return [WeightFunction.constant(v) for v in values]
    a_values = DEFAULT_A_GRID if a_values is None else list(a_values)
    if kind == "binary":
        return [WeightFunction.binary(a) for a in a_values]
    if kind in ("sigmoid", "linear"):
        b_values = DEFAULT_B_GRID if b_values is None else list(b_values)
        return [WeightFunction(kind, a=float(a), b=float(b)) for a in a_values for b in b_values]
    raise ValidationError(f"unknown weight kind {kind!r}")
