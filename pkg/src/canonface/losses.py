"""Training objective over depth, ray and canonical maps.

For a prediction X with ground truth X*, valid-pixel set Omega and error
E = X - X*:

* regression   mean over Omega of |E(p)|
* confidence   mean over Omega of gamma * |E(p)| * W(p) - alpha * log W(p)
* gradient     (1/|Omega|) * sum of |E(q) - E(p)| over horizontally and
               vertically adjacent pixel pairs that are both valid

|E(p)| sums absolute values over channels (``norm="l1"``, default) or takes
the Euclidean norm (``norm="l2"``). The confidence W is one scalar per pixel.

The total adds the three terms for depth and rays with unit weight and the
canonical-map terms weighted by ``lambda_c``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

L1 = "l1"
L2 = "l2"


class LossInputError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.2
    gamma: float = 1.0
    lambda_c: float = 5.0
    lambda_d: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "gamma", "lambda_c", "lambda_d"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, v)
        if self.lambda_c < 0 or self.lambda_d < 0:
            raise ValueError("loss weights lambda_c and lambda_d must be >= 0")


@dataclass(eq=False)
class LossInputs:
    pred: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    confidence: Optional[np.ndarray] = None
    norm: str = L1

    def __post_init__(self):
        p = np.asarray(self.pred, dtype=np.float64)
        t = np.asarray(self.target, dtype=np.float64)
        if p.ndim == 2:
            p = p[..., None]
        if t.ndim == 2:
            t = t[..., None]
        if p.shape != t.shape or p.ndim != 3:
            raise LossInputError(f"prediction {p.shape} and target {t.shape} must match as (H, W, C)")
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != p.shape[:2]:
            raise LossInputError(f"mask {m.shape} does not match prediction {p.shape[:2]}")
        self.pred, self.target, self.mask = p, t, m
        if self.confidence is not None:
            c = np.asarray(self.confidence, dtype=np.float64)
            if c.ndim == 3 and c.shape[2] == 1:
                c = c[..., 0]
            if c.shape != m.shape:
                raise LossInputError(f"confidence {c.shape} does not match mask {m.shape}")
            self.confidence = c
        if self.norm not in (L1, L2):
            raise LossInputError(f"unknown norm {self.norm!r}")

    @property
    def error(self):
        return self.pred - self.target

    def n_valid(self):
        n = int(np.count_nonzero(self.mask))
        if n == 0:
            raise LossInputError("empty valid-pixel set")
        return n

    def replace(self, **kw):
        d = dict(pred=self.pred, target=self.target, mask=self.mask,
                 confidence=self.confidence, norm=self.norm)
        d.update(kw)
        return LossInputs(**d)


def _pixel_error(inp):
    e = inp.error
    if inp.norm == L1:
        return np.abs(e).sum(axis=2)
    return np.sqrt((e * e).sum(axis=2))


def _pixel_error_grad(inp):
    # d|E(p)| / dX(p), per channel
    e = inp.error
    if inp.norm == L1:
        return np.sign(e)
    n = np.sqrt((e * e).sum(axis=2, keepdims=True))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, e / n, 0.0)


def _confidence(inp):
    if inp.confidence is None:
        raise LossInputError("confidence-weighted loss needs a confidence map")
    w = inp.confidence
    bad = inp.mask & ~(w > 0)
    if bad.any():
        v, u = np.argwhere(bad)[0]
        raise LossInputError(f"confidence must be > 0 on valid pixels; pixel (u={u}, v={v}) "
                             f"has {w[v, u]!r}")
    return w


def reg_loss(inp):
    n = inp.n_valid()
    return float(_pixel_error(inp)[inp.mask].sum() / n)


def conf_loss(inp, w=None):
    w = w or LossWeights()
    n = inp.n_valid()
    c = _confidence(inp)[inp.mask]
    e = _pixel_error(inp)[inp.mask]
    return float((w.gamma * e * c - w.alpha * np.log(c)).sum() / n)


def _valid_pairs(mask):
    return mask[:, 1:] & mask[:, :-1], mask[1:, :] & mask[:-1, :]


def grad_loss(inp):
    h, wd = inp.mask.shape
    if h < 2 or wd < 2:
        raise LossInputError(f"gradient loss needs at least 2x2 pixels, got {h}x{wd}")
    n = inp.n_valid()
    e = inp.error
    px, py = _valid_pairs(inp.mask)
    gx = np.abs(e[:, 1:] - e[:, :-1])[px].sum()
    gy = np.abs(e[1:, :] - e[:-1, :])[py].sum()
    return float((gx + gy) / n)


TERMS = ("reg", "conf", "grad")
MAPS = ("depth", "ray", "canon")


def total_loss(depth, ray, canon, w=None, normalize_channels=False):
    """Weighted sum over the three maps; returns (total, breakdown of nine terms).

    ``normalize_channels`` divides each map's terms by its channel count
    (off by default).
    """
    w = w or LossWeights()
    breakdown = {}
    total = 0.0
    scale = {"depth": w.lambda_d, "ray": 1.0, "canon": w.lambda_c}
    for name, inp in zip(MAPS, (depth, ray, canon)):
        vals = {"reg": reg_loss(inp), "conf": conf_loss(inp, w), "grad": grad_loss(inp)}
        div = inp.pred.shape[2] if normalize_channels else 1
        for term in TERMS:
            breakdown[f"{name}_{term}"] = vals[term]
            total += scale[name] * vals[term] / div
    return total, breakdown


def recompose(breakdown, w=None, channels=None):
    """Total from a breakdown; ``channels`` maps map name -> channel divisor."""
    w = w or LossWeights()
    scale = {"depth": w.lambda_d, "ray": 1.0, "canon": w.lambda_c}
    total = 0.0
    for name in MAPS:
        div = 1 if channels is None else channels[name]
        for term in TERMS:
            total += scale[name] * breakdown[f"{name}_{term}"] / div
    return total


# -- analytic (sub)gradients ---------------------------------------------------

def reg_loss_grad(inp):
    """d reg_loss / d pred, (H, W, C)."""
    n = inp.n_valid()
    g = _pixel_error_grad(inp) / n
    g[~inp.mask] = 0.0
    return {"pred": g}


def conf_loss_grad(inp, w=None):
    """Gradients w.r.t. prediction (H, W, C) and confidence (H, W)."""
    w = w or LossWeights()
    n = inp.n_valid()
    c = _confidence(inp)
    e = _pixel_error(inp)
    gp = w.gamma * _pixel_error_grad(inp) * c[..., None] / n
    with np.errstate(divide="ignore", invalid="ignore"):
        gc = (w.gamma * e - w.alpha / c) / n
    gp[~inp.mask] = 0.0
    gc = np.where(inp.mask, gc, 0.0)
    return {"pred": gp, "confidence": gc}


def grad_loss_grad(inp):
    n = inp.n_valid()
    e = inp.error
    g = np.zeros_like(e)
    px, py = _valid_pairs(inp.mask)
    sx = np.sign(e[:, 1:] - e[:, :-1]) * px[..., None]
    sy = np.sign(e[1:, :] - e[:-1, :]) * py[..., None]
    g[:, 1:] += sx
    g[:, :-1] -= sx
    g[1:, :] += sy
    g[:-1, :] -= sy
    return {"pred": g / n}


_LOSSES = {
    "reg": (reg_loss, reg_loss_grad, False),
    "conf": (conf_loss, conf_loss_grad, True),
    "grad": (grad_loss, grad_loss_grad, False),
}


def _kink_check(inp, h, kind):
    limit = 10.0 * h
    e = inp.error
    if kind in ("reg", "conf"):
        if inp.norm == L1:
            bad = inp.mask[..., None] & (np.abs(e) < limit)
        else:
            bad = (inp.mask & (np.sqrt((e * e).sum(axis=2)) < limit))[..., None]
        if bad.any():
            v, u, c = np.argwhere(bad)[0]
            raise LossInputError(f"error at pixel (u={u}, v={v}, c={c}) is within {limit:g} "
                                 "of the |.| kink; finite differences are unreliable")
    else:
        px, py = _valid_pairs(inp.mask)
        dx = px[..., None] & (np.abs(e[:, 1:] - e[:, :-1]) < limit)
        dy = py[..., None] & (np.abs(e[1:, :] - e[:-1, :]) < limit)
        for d, axis in ((dx, "x"), (dy, "y")):
            if d.any():
                v, u, c = np.argwhere(d)[0]
                raise LossInputError(f"{axis}-difference at pixel (u={u}, v={v}, c={c}) is "
                                     f"within {limit:g} of the |.| kink")


def grad_check(loss, inp, h=1e-4, w=None, floor=1e-2):
    """Max relative deviation between analytic gradients and central differences.

    ``loss`` is one of "reg", "conf", "grad". Every |.| argument must be at
    least 10*h away from zero so no perturbation crosses a kink. Each
    component is compared relative to max(|analytic|, |numeric|), floored at
    ``floor`` times the largest analytic component of that gradient so that
    exact zeros are not judged against rounding noise.
    """
    if loss not in _LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {sorted(_LOSSES)}")
    value_fn, grad_fn, uses_conf = _LOSSES[loss]
    _kink_check(inp, h, loss)
    w = w or LossWeights()
    if uses_conf:
        f = lambda x: value_fn(x, w)  # noqa: E731
        grads = grad_fn(inp, w)
        c = _confidence(inp)
        bad = inp.mask & (c <= h)
        if bad.any():
            v, u = np.argwhere(bad)[0]
            raise LossInputError(f"confidence at pixel (u={u}, v={v}) is within h of zero")
    else:
        f = value_fn
        grads = grad_fn(inp)
    worst = 0.0
    for name, analytic in grads.items():
        base = inp.pred if name == "pred" else inp.confidence
        numeric = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[i] += h
            minus[i] -= h
            fp = f(inp.replace(**{name: plus}))
            fm = f(inp.replace(**{name: minus}))
            numeric[i] = (fp - fm) / (2.0 * h)
        scale = max(float(np.abs(analytic).max()), np.finfo(float).tiny)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst
