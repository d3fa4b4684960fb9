"""MAP training loop and inference of representations for new data.

Per epoch: the training rows are shuffled and visited in batches.  Each
batch loss is the reconstruction loss plus the negative mixture log-density
of the batch's representations plus a batch-weighted share of the negative
prior log-density of the mixture parameters.  Decoder and mixture take an
Adam step after every batch; the representations take one step per epoch
using the gradient accumulated over all batches.
"""

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from dgd import autodiff as ad
from dgd import backend
from dgd.autodiff import DiffArray
from dgd.decoder import DecoderNet, NegativeBinomialHead, bce_loss, nb_log_likelihood
from dgd.errors import ContractError, DataError, DimensionError, TrainingDivergedError
from dgd.gmm import GaussianMixture, gmm_log_prob, gmm_prior_log_prob, hard_assign, \
    supervised_log_prob
from dgd.optim import Adam, LearningRates, OptimizerTrio

log = logging.getLogger(__name__)

PROFILES = ("counts", "binary")


@dataclass
class TrainConfig:
    profile: str = "counts"
    epochs: int = 800
    batch_size: int = 128
    latent_dim: int = 20
    n_components: int = 9
    hidden: tuple = (100, 100, 100)
    hidden_activation: str = "relu"
    lr_decoder: float = 1e-3
    lr_representation: float = 1e-2
    lr_gmm: float = 1e-2
    betas: tuple = (0.5, 0.7)
    weight_decay: float = 1e-4
    scale: float = 1.0
    sharpness: float = 1.0
    dirichlet_alpha: float = 1.0
    sigma_init: float = 0.02
    logvar_prior_sd: float = 1.0
    prior_weight: float = None  # None: batch_size / N per batch
    init_log_dispersion: float = 0.0
    supervised: bool = False
    label_to_component: list = None
    seed: int = 0
    lr_milestone: int = 500
    lr_milestone_factor: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.betas = tuple(float(b) for b in self.betas)
        if self.profile not in PROFILES:
            raise ContractError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        for name in ("batch_size", "latent_dim", "n_components"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        for name in ("scale", "sharpness", "dirichlet_alpha", "logvar_prior_sd"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.sigma_init is not None and self.sigma_init <= 0:
            raise ContractError("sigma_init must be positive")

    @classmethod
    def counts_defaults(cls, **overrides):
        """Single-cell count defaults."""
        return cls(**overrides)

    @classmethod
    def binary_defaults(cls, **overrides):
        """Binary-valued (image-like) defaults: sharper, wider softball and
        component sd = scale / K."""
        base = dict(profile="binary", epochs=500, hidden=(100,), lr_gmm=1e-1,
                    scale=3.0, sharpness=5.0, dirichlet_alpha=2.0, sigma_init=None,
                    lr_milestone=None)
        base.update(overrides)
        cfg = cls(**base)
        if cfg.sigma_init is None:
            cfg.sigma_init = cfg.scale / cfg.n_components
        return cfg

    @property
    def learning_rates(self):
        return LearningRates(self.lr_decoder, self.lr_representation, self.lr_gmm)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class RepresentationSet:
    """Trainable N x m latent matrix, one row per sample."""

    def __init__(self, n_samples, dim, init=None):
        if init is None:
            values = np.zeros((n_samples, dim))
            self.init_mode = "zero"
        else:
            values = np.asarray(init, dtype=np.float64)
            if values.shape != (n_samples, dim):
                raise DimensionError(f"initial tensor must be {(n_samples, dim)}, got {values.shape}")
            self.init_mode = "provided"
        self.Z = DiffArray(values, requires_grad=True, name="representations")

    @property
    def values(self):
        return self.Z.values

    def __len__(self):
        return self.Z.shape[0]


@dataclass
class TrainResult:
    decoder: DecoderNet
    gmm: GaussianMixture
    representations: RepresentationSet
    head: NegativeBinomialHead = None
    history: list = field(default_factory=list)


def reconstruction_loss(profile, pred, x, scale, head):
    if profile == "counts":
        return nb_log_likelihood(pred, x, scale, head)
    return bce_loss(pred, x, reduction="sum")


def resolve_assignments(dataset, config):
    if not config.supervised:
        return None
    if dataset.labels is None:
        raise ContractError("supervised training needs labels for every sample")
    mapping = config.label_to_component
    n_labels = int(dataset.labels.max()) + 1
    if mapping is None:
        mapping = list(range(n_labels))
    mapping = np.asarray(mapping, dtype=np.int64)
    if mapping.size < n_labels or mapping.min() < 0 or mapping.max() >= config.n_components:
        raise ContractError("label_to_component must map every label to a valid component")
    return mapping[dataset.labels]


class Trainer:
    """Holds model state and optimizers for one training run."""

    def __init__(self, dataset, config, rng=None, decoder=None, gmm=None, head=None,
                 representations=None):
        self.dataset = dataset
        self.config = config
        if dataset.profile != config.profile:
            raise ContractError(f"dataset profile {dataset.profile!r} != config {config.profile!r}")
        if dataset.n_samples < 1:
            raise DataError("no samples")
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        m, K = config.latent_dim, config.n_components
        if gmm is None:
            gmm = GaussianMixture(K, m, self.rng, scale=config.scale,
                                  sharpness=config.sharpness,
                                  dirichlet_alpha=config.dirichlet_alpha,
                                  sigma=config.sigma_init,
                                  logvar_prior_sd=config.logvar_prior_sd)
        if decoder is None:
            sizes = [m, *config.hidden, dataset.n_features]
            decoder = DecoderNet(sizes, self.rng, config.hidden_activation)
        if decoder.n_out != dataset.n_features or decoder.latent_dim != m or gmm.dim != m:
            raise DimensionError("decoder / mixture / data dimensions disagree")
        if head is None and config.profile == "counts":
            head = NegativeBinomialHead(dataset.n_features, config.init_log_dispersion)
        if representations is None:
            representations = RepresentationSet(dataset.n_samples, m)
        self.decoder, self.gmm, self.head = decoder, gmm, head
        self.reps = representations
        self.assigned = resolve_assignments(dataset, config)
        model_params = decoder.parameters() + (head.parameters() if head else [])
        self.model_params = model_params
        self.optim = OptimizerTrio(model_params, decoder.weights, self.reps.Z,
                                   gmm.parameters(), config.learning_rates,
                                   betas=config.betas, weight_decay=config.weight_decay)
        self.epoch = 0
        self.history = []

    def _batch_loss(self, rows):
        cfg = self.config
        N = self.dataset.n_samples
        x, scale = self.dataset.batch(rows)
        z = ad.take(self.reps.Z, rows)
        pred = self.decoder(z)
        recon = reconstruction_loss(cfg.profile, pred, x, scale, self.head)
        if self.assigned is not None:
            latent = supervised_log_prob(self.gmm, z, self.assigned[rows])
        else:
            latent = gmm_log_prob(self.gmm, z)
        weight = cfg.prior_weight if cfg.prior_weight is not None else len(rows) / N
        gmm_term = ad.sub(ad.scale(gmm_prior_log_prob(self.gmm), -weight), ad.sum(latent))
        return recon, gmm_term

    def run_epoch(self, step_representations=True):
        """One pass over the data.  With ``step_representations=False`` the
        accumulated representation gradient is left in ``reps.Z.grad``."""
        cfg = self.config
        N = self.dataset.n_samples
        if cfg.lr_milestone is not None and self.epoch == cfg.lr_milestone:
            self.optim.decoder.lr *= cfg.lr_milestone_factor
        t0 = time.perf_counter()
        perm = self.rng.permutation(N)
        touched = np.zeros(N, dtype=bool)
        recon_sum = gmm_sum = 0.0
        for b, start in enumerate(range(0, N, cfg.batch_size)):
            rows = perm[start:start + cfg.batch_size]
            recon, gmm_term = self._batch_loss(rows)
            loss = ad.add(recon, gmm_term)
            if not math.isfinite(loss.item()):
                ad.get_tape().clear()
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {self.epoch}, batch {b}",
                    epoch=self.epoch, batch=b)
            ad.backward(loss)
            try:
                self.optim.decoder.step()
                self.optim.gmm.step()
            except TrainingDivergedError as exc:
                exc.epoch, exc.batch = self.epoch, b
                raise
            self.optim.decoder.zero_grad()
            self.optim.gmm.zero_grad()
            touched[rows] = True
            recon_sum += recon.item()
            gmm_sum += gmm_term.item()
        if step_representations:
            self.optim.representation.step(None if touched.all() else touched)
            self.reps.Z.zero_grad()
        record = {
            "epoch": self.epoch,
            "total_loss": (recon_sum + gmm_sum) / N,
            "recon_loss": recon_sum / N,
            "gmm_loss": gmm_sum / N,
            "wall_time_s": time.perf_counter() - t0,
        }
        self.history.append(record)
        self.epoch += 1
        return record

    def fit(self, epochs=None, callback=None):
        epochs = self.config.epochs if epochs is None else epochs
        for _ in range(epochs):
            rec = self.run_epoch()
            if callback is not None:
                callback(rec)
            log.debug("epoch %d loss %.6f", rec["epoch"], rec["total_loss"])
        return self.result()

    def result(self):
        return TrainResult(self.decoder, self.gmm, self.reps, self.head, self.history)


def train(dataset, config, rng=None):
    """Fit decoder, mixture and representations; returns a :class:`TrainResult`."""
    return Trainer(dataset, config, rng).fit()


def hard_cluster(gmm, Z):
    """Most probable component for each row of ``Z`` (lowest index on ties)."""
    Z = Z.values if isinstance(Z, (DiffArray, RepresentationSet)) else Z
    return hard_assign(gmm, Z)


@contextmanager
def frozen(params):
    """Temporarily stop gradient tracking on ``params``."""
    flags = [p.requires_grad for p in params]
    saved = [p.grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f, g in zip(params, flags, saved):
            p.requires_grad = f
            p.grad = g


def _per_sample_recon(profile, pred, x, scale, head):
    """Plain-array reconstruction loss per row."""
    if profile == "counts":
        mu = np.maximum(pred * scale[:, None], ad.LOG_FLOOR)
        return -backend.nb_logpmf(x, mu, head.dispersion).sum(axis=1)
    p = np.clip(pred, ad.PROB_EPS, 1.0 - ad.PROB_EPS)
    return -(x * np.log(p) + (1.0 - x) * np.log(1.0 - p)).sum(axis=1)


def component_recon_losses(decoder, gmm, dataset, head=None, chunk=1024):
    """[N, K] reconstruction loss of every sample under each decoded component mean."""
    with ad.no_grad():
        decoded = decoder(gmm.means.values).values
    N = dataset.n_samples
    out = np.empty((N, gmm.n_components))
    for start in range(0, N, chunk):
        rows = np.arange(start, min(N, start + chunk))
        x, scale = dataset.batch(rows)
        for k in range(gmm.n_components):
            pred = np.broadcast_to(decoded[k], x.shape)
            out[rows, k] = _per_sample_recon(dataset.profile, pred, x, scale, head)
    return out


def sample_objective(decoder, gmm, dataset, Z, head=None, chunk=1024):
    """Per-sample reconstruction loss minus mixture log-density."""
    N = dataset.n_samples
    out = np.empty(N)
    with ad.no_grad():
        for start in range(0, N, chunk):
            rows = np.arange(start, min(N, start + chunk))
            x, scale = dataset.batch(rows)
            z = Z[rows]
            pred = decoder(z).values
            out[rows] = (_per_sample_recon(dataset.profile, pred, x, scale, head)
                         - gmm_log_prob(gmm, z).values)
    return out


def infer_representations(decoder, gmm, dataset, head=None, init="component-means",
                          epochs=10, batch_size=32, lr=1e-2, betas=(0.5, 0.7),
                          n_starts=1, rng=None):
    """Fit representations for new samples with decoder and mixture frozen.

    ``init="component-means"`` starts each sample at the component mean whose
    decoded output reconstructs it best (the ``n_starts`` best means when
    several starts are requested; the start with the lowest final objective
    wins).  ``init="zeros"`` starts at the origin.
    """
    if dataset.n_features != decoder.n_out:
        raise DimensionError(f"data has {dataset.n_features} features, decoder {decoder.n_out}")
    if dataset.profile == "counts" and head is None:
        raise ContractError("counts inference needs the negative binomial head")
    rng = rng if rng is not None else np.random.default_rng(0)
    N, m, K = dataset.n_samples, gmm.dim, gmm.n_components
    if init == "component-means":
        n_starts = max(1, min(int(n_starts), K))
        losses = component_recon_losses(decoder, gmm, dataset, head)
        order = np.argsort(losses, axis=1, kind="stable")[:, :n_starts]
        starts = gmm.means.values[order.T.reshape(-1)]
    elif init == "zeros":
        n_starts = 1
        starts = np.zeros((N, m))
    else:
        raise ContractError(f"unknown init mode {init!r}")

    rows_all = np.tile(np.arange(N), n_starts)
    reps = RepresentationSet(N * n_starts, m, starts)
    Z = reps.Z
    opt = Adam([Z], lr, betas, name="representation")
    frozen_params = decoder.parameters() + gmm.parameters() + (head.parameters() if head else [])
    with frozen(frozen_params):
        for _ in range(epochs):
            perm = rng.permutation(N * n_starts)
            for start in range(0, len(perm), batch_size):
                idx = perm[start:start + batch_size]
                x, scale = dataset.batch(rows_all[idx])
                z = ad.take(Z, idx)
                recon = reconstruction_loss(dataset.profile, decoder(z), x, scale, head)
                loss = ad.sub(recon, ad.sum(gmm_log_prob(gmm, z)))
                ad.backward(loss)
            opt.step()
            Z.zero_grad()

    if n_starts == 1:
        return reps
    obj = np.stack([
        sample_objective(decoder, gmm, dataset, Z.values[s * N:(s + 1) * N], head)
        for s in range(n_starts)])
    best = np.argmin(obj, axis=0)
    chosen = Z.values[best * N + np.arange(N)]
    return RepresentationSet(N, m, chosen)
