"""Decoder network and reconstruction likelihoods.

The decoder is a plain MLP ending in a sigmoid, so its outputs are either
Bernoulli probabilities (binary profile) or per-max-normalised negative
binomial means (counts profile).
"""

import numpy as np

from dgd import autodiff as ad
from dgd import backend
from dgd.autodiff import PROB_EPS, DiffArray
from dgd.errors import ContractError, DataError, DimensionError

_ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
}


class DecoderNet:
    """Stack of affine layers: hidden activation between, sigmoid at the end.

    ``layer_sizes`` is ``[m, h_1, ..., h_L, n_out]``.
    """

    def __init__(self, layer_sizes, rng=None, hidden_activation="relu"):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {layer_sizes}")
        if hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {hidden_activation!r}")
        if rng is None:
            rng = np.random.default_rng()
        self.layer_sizes = sizes
        self.hidden_activation = hidden_activation
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
            self.weights.append(DiffArray(w, requires_grad=True, name=f"decoder.w{i}"))
            self.biases.append(DiffArray(b, requires_grad=True, name=f"decoder.b{i}"))

    @property
    def latent_dim(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, z):
        return decoder_forward(self, z)


class NegativeBinomialHead:
    """Gene-wise log-dispersion, learned alongside the decoder."""

    def __init__(self, n_out, init_log_dispersion=0.0):
        self.log_dispersion = DiffArray(np.full(int(n_out), float(init_log_dispersion)),
                                        requires_grad=True, name="nb.log_dispersion")

    @property
    def dispersion(self):
        return np.exp(self.log_dispersion.values)

    def parameters(self):
        return [self.log_dispersion]


def decoder_forward(net, z):
    z = ad.as_diff(z)
    if z.ndim != 2 or z.shape[1] != net.latent_dim:
        raise DimensionError(f"decoder expects [B, {net.latent_dim}] input, got {z.shape}")
    act = _ACTIVATIONS[net.hidden_activation]
    h = z
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = act(h)
    return ad.clamp(ad.sigmoid(h), PROB_EPS, 1.0 - PROB_EPS)


def bce_loss(pred, target, reduction="sum"):
    """Binary cross-entropy; ``reduction`` is "sum", "mean" or "none"."""
    pred = ad.as_diff(pred)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"bce: pred {pred.shape} vs target {t.shape}")
    if np.any((t < 0) | (t > 1)) or np.any(np.isnan(t)):
        raise ContractError("bce targets must lie in [0, 1]")
    p = ad.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    ll = ad.add(ad.mul(t, ad.log(p)), ad.mul(1.0 - t, ad.log(ad.sub(1.0, p))))
    per = ad.negate(ll)
    if reduction == "none":
        return per
    if reduction == "mean":
        return ad.mean(per)
    return ad.sum(per)


def _check_scale(scale, n_rows):
    s = np.asarray(scale, dtype=np.float64)
    if s.shape != (n_rows,):
        raise DimensionError(f"scale must have shape ({n_rows},), got {s.shape}")
    bad = np.flatnonzero(~(s > 0))
    if bad.size:
        raise DataError(f"sample(s) {bad.tolist()} have no counts (scale <= 0)")
    return s


def nb_log_likelihood(pred, counts, scale, head):
    """Negated summed NB log-likelihood (a loss) of integer ``counts`` given
    normalised means ``pred`` [B, G] and per-sample max counts ``scale``."""
    pred = ad.as_diff(pred)
    x = np.asarray(counts, dtype=np.float64)
    s = _check_scale(scale, x.shape[0])
    mean = ad.mul(pred, s[:, None])
    return ad.negate(ad.sum(ad.nb_logpmf(mean, head.log_dispersion, x)))


def nb_logpmf_values(pred, counts, scale, head):
    """Plain-array per-entry log-pmf [B, G]."""
    x = np.asarray(counts, dtype=np.float64)
    s = _check_scale(scale, x.shape[0])
    pv = pred.values if isinstance(pred, DiffArray) else np.asarray(pred, dtype=np.float64)
    mu = np.maximum(pv * s[:, None], ad.LOG_FLOOR)
    return backend.nb_logpmf(x, mu, head.dispersion)


def per_cell_rmse(pred, counts, scale, space="normalized"):
    pv = pred.values if isinstance(pred, DiffArray) else np.asarray(pred, dtype=np.float64)
    x = np.asarray(counts, dtype=np.float64)
    s = _check_scale(scale, x.shape[0])
    if space == "normalized":
        err = pv - x / s[:, None]
    elif space == "raw":
        err = pv * s[:, None] - x
    else:
        raise ValueError(f"unknown rmse space {space!r}")
    return np.sqrt(np.mean(err * err, axis=1))


def nb_point_metrics(pred, counts, scale, head, space="normalized"):
    """Per-cell NLL and overall RMSE (root of the mean squared error over all
    entries) in the requested space."""
    nll = -nb_logpmf_values(pred, counts, scale, head).sum(axis=1)
    rmse = float(np.sqrt(np.mean(per_cell_rmse(pred, counts, scale, space) ** 2)))
    return nll, rmse
