"""Decision-level wrappers around trained networks, plus the two reference baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from poltwin.dataset import Scaler, features
from poltwin.nn import (
    COMPONENT,
    MDN_WEIBULL3,
    PAPER_WEIGHTED_SUM,
    SOFTMAX_CLASSIFIER,
    DenseNet,
    forward,
    mdn_heads,
    mdn_sample,
    softmax,
    weibull_inverse_cdf,
    weibull_logpdf,
)
from poltwin.vocab import N_TAGS, Tag

MIN_STAY_S = 60.0

ARGMAX = "ARGMAX"
SAMPLE = "SAMPLE"


class SurrogateError(ValueError):
    pass


class WeibullFitError(SurrogateError):
    pass


def _check_net(net, scaler, head):
    if net is None or scaler is None:
        raise SurrogateError("model not loaded")
    if net.head != head:
        raise SurrogateError(f"expected a {head} network, got {net.head}")


@dataclass(frozen=True)
class NextDestinationModel:
    net: DenseNet
    scaler: Scaler
    mode: str = SAMPLE

    def __post_init__(self) -> None:
        _check_net(self.net, self.scaler, SOFTMAX_CLASSIFIER)
        if self.mode not in (ARGMAX, SAMPLE):
            raise SurrogateError(f"unknown decision mode {self.mode!r}")

    def probabilities(self, source_tag, user_class, seconds_since_entry) -> np.ndarray:
        x = features(source_tag, user_class, seconds_since_entry, self.scaler)
        return softmax(forward(self.net, x)[0])


@dataclass(frozen=True)
class StayDurationModel:
    net: DenseNet
    scaler: Scaler
    scheme: str = PAPER_WEIGHTED_SUM

    def __post_init__(self) -> None:
        _check_net(self.net, self.scaler, MDN_WEIBULL3)
        if self.scheme not in (PAPER_WEIGHTED_SUM, COMPONENT):
            raise SurrogateError(f"unknown sampling scheme {self.scheme!r}")


def choose_tag(probs: np.ndarray, mode: str, rng: np.random.Generator | None,
               allowed=None) -> Tag:
    """ARGMAX (lowest index wins ties) or a categorical draw, optionally masked."""
    p = np.asarray(probs, float).copy()
    if allowed is not None:
        mask = np.zeros(N_TAGS, bool)
        mask[[int(t) for t in allowed]] = True
        p = np.where(mask, p, 0.0)
        if p.sum() <= 0:
            p = mask.astype(float)
        p /= p.sum()
    if mode == ARGMAX:
        return Tag(int(np.argmax(p)))
    return Tag(int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right").clip(0, N_TAGS - 1)))


def predict_next(model: NextDestinationModel, source_tag, user_class, seconds_since_entry,
                 rng: np.random.Generator | None = None, allowed=None) -> Tag:
    if model is None:
        raise SurrogateError("model not loaded")
    probs = model.probabilities(source_tag, user_class, seconds_since_entry)[0]
    if model.mode == SAMPLE and rng is None:
        raise SurrogateError("SAMPLE mode needs an rng")
    return choose_tag(probs, model.mode, rng, allowed)


def predict_next_batch(model: NextDestinationModel, source_tags, user_classes, times) -> np.ndarray:
    """ARGMAX tag indices for many rows at once (evaluation path)."""
    probs = model.probabilities(source_tags, user_classes, times)
    return probs.argmax(axis=1)


def stay_from_normalized(scaler: Scaler, target) -> np.ndarray:
    """Normalized (ε-shifted) stays back to seconds, floored at one minute."""
    return np.maximum(scaler.unscale_stay(target), MIN_STAY_S)


def predict_stay(model: StayDurationModel, dest_tag, user_class, seconds_since_entry,
                 rng: np.random.Generator) -> float:
    if model is None:
        raise SurrogateError("model not loaded")
    if Tag(dest_tag) == Tag.END:
        raise SurrogateError("END has no stay duration")
    x = features(dest_tag, user_class, seconds_since_entry, model.scaler)
    params = mdn_heads(forward(model.net, x)[0])
    target = mdn_sample(params, rng, scheme=model.scheme)
    seconds = float(stay_from_normalized(model.scaler, target)[0])
    if not math.isfinite(seconds):
        seconds = model.scaler.stay_max
    return seconds


def sample_normalized_stays(model: StayDurationModel, dest_tags, user_classes, times,
                            rng: np.random.Generator) -> np.ndarray:
    """One normalized draw per row, no clamping (evaluation path)."""
    x = features(dest_tags, user_classes, times, model.scaler)
    return mdn_sample(mdn_heads(forward(model.net, x)[0]), rng, scheme=model.scheme)


def uniform_baseline(rng: np.random.Generator, size: int | None = None):
    """Uniform draw over the six tags."""
    if size is None:
        return Tag(int(rng.integers(N_TAGS)))
    return rng.integers(N_TAGS, size=size)


@dataclass(frozen=True)
class WeibullBaseline:
    scale: float
    concentration: float

    def __post_init__(self) -> None:
        if not (self.scale > 0 and self.concentration > 0):
            raise SurrogateError("Weibull parameters must be positive")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return weibull_inverse_cdf(rng.random(size), self.scale, self.concentration)

    def nll(self, samples) -> float:
        return float(-weibull_logpdf(np.asarray(samples, float), self.scale,
                                     self.concentration).mean())


def fit_weibull(samples, tol: float = 1e-8, max_iter: int = 200) -> WeibullBaseline:
    """Maximum-likelihood Weibull fit.

    The shape solves the profile-likelihood equation
    ``sum(x^k ln x) / sum(x^k) - 1/k - mean(ln x) = 0`` by safeguarded
    Newton iteration; the scale follows in closed form.
    """
    x = np.asarray(samples, float)
    if x.size < 10:
        raise WeibullFitError("need at least 10 samples")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise WeibullFitError("samples must be finite and positive")
    x_max = x.max()
    ly = np.log(x / x_max)   # ≤ 0, keeps y**k bounded
    mean_ly = ly.mean()

    def g_and_dg(k):
        w = np.exp(k * ly)
        s0 = w.sum()
        m1 = (w * ly).sum() / s0
        m2 = (w * ly * ly).sum() / s0
        return m1 - 1.0 / k - mean_ly, (m2 - m1 * m1) + 1.0 / (k * k)

    lo, hi = 0.0, 1.0
    while g_and_dg(hi)[0] < 0:
        lo, hi = hi, hi * 2.0
        if hi > 1e8:
            raise WeibullFitError("degenerate sample: shape diverges (all values equal?)")
    k = hi if lo == 0.0 else 0.5 * (lo + hi)
    for _ in range(max_iter):
        g, dg = g_and_dg(k)
        if g > 0:
            hi = k
        else:
            lo = k
        step = k - g / dg
        new_k = step if lo < step < hi else 0.5 * (lo + hi)
        if abs(new_k - k) < tol:
            k = new_k
            break
        k = new_k
    else:
        raise WeibullFitError(f"shape did not converge in {max_iter} iterations")
    scale = x_max * float(np.mean(np.exp(k * ly))) ** (1.0 / k)
    return WeibullBaseline(scale, k)
