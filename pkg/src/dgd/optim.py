"""Adam with decoupled weight decay, and the three-group optimizer set.

Decoder, representations and mixture parameters each get their own Adam
instance because they are stepped at different cadences (per batch vs. per
epoch) and need very different learning rates.
"""

from dataclasses import dataclass

import numpy as np

from dgd.errors import TrainingDivergedError


class Adam:
    """Bias-corrected Adam.

    ``weight_decay`` is applied multiplicatively to the parameter values of
    ``decay_params`` (by default none) before the moment update.
    """

    def __init__(self, params, lr=1e-3, betas=(0.5, 0.7), eps=1e-8, weight_decay=0.0,
                 decay_params=(), name="params"):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        decay_ids = {id(p) for p in decay_params}
        self._decay = [id(p) in decay_ids for p in self.params]
        self.name = name
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def _check_finite(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                label = p.name or self.name
                raise TrainingDivergedError(
                    f"non-finite gradient in parameter group {self.name!r} ({label})",
                    group=self.name)

    def step(self, row_mask=None):
        """One update.  ``row_mask`` (single-parameter groups only) limits the
        update, moments included, to the selected rows."""
        self._check_finite()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for p, m, v, decay in zip(self.params, self.m, self.v, self._decay):
            g = p.grad
            if row_mask is not None:
                rows = np.flatnonzero(row_mask)
                if decay and self.weight_decay:
                    p.values[rows] *= 1.0 - self.lr * self.weight_decay
                m[rows] = b1 * m[rows] + (1.0 - b1) * g[rows]
                v[rows] = b2 * v[rows] + (1.0 - b2) * g[rows] ** 2
                p.values[rows] -= self.lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + self.eps)
                continue
            if decay and self.weight_decay:
                p.values *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        zero_grad(self.params)


def zero_grad(params):
    for p in params:
        p.zero_grad()


@dataclass
class LearningRates:
    decoder: float = 1e-3
    representation: float = 1e-2
    gmm: float = 1e-2

    @classmethod
    def from_decoder(cls, decoder_lr, gmm_factor=10.0):
        """Rule of thumb: representations 10x, mixture 10-20x the decoder rate."""
        if not 10.0 <= gmm_factor <= 20.0:
            raise ValueError("gmm_factor should lie in [10, 20]")
        return cls(decoder_lr, 10.0 * decoder_lr, gmm_factor * decoder_lr)


class OptimizerTrio:
    """Separate Adam instances for decoder, representations and mixture."""

    def __init__(self, decoder_params, decay_params, representation, gmm_params, lrs,
                 betas=(0.5, 0.7), weight_decay=1e-4, eps=1e-8):
        self.decoder = Adam(decoder_params, lrs.decoder, betas, eps, weight_decay,
                            decay_params, name="decoder")
        self.representation = Adam([representation], lrs.representation, betas, eps,
                                   name="representation")
        self.gmm = Adam(gmm_params, lrs.gmm, betas, eps, name="gmm")

    def groups(self):
        return (self.decoder, self.representation, self.gmm)
