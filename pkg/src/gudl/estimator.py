"""scikit-learn style wrappers.

``DeqChannelEstimator.fit`` trains the equilibrium network from measurements
(and optionally ground truth); ``predict`` solves the fixed point for new
measurements. ``SparseBaselineEstimator`` exposes OMP, ISTA and AMP through
the same interface.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .baselines import amp, ista, omp
from .core import StandardProblem, ValidationError, nmse_db
from .deq import DeqConfig, forward_fixed_point
from .neural import init_nle, spectral_normalize
from .training import GsureConfig, TrainConfig, train


def _problem(A, c_diag, Y, sigma2=0.0, validate=False):
    Y = check_array(Y, dtype=float)
    A = np.asarray(A, dtype=float)
    if Y.shape[1] != A.shape[0]:
        raise ValidationError(f"measurements have {Y.shape[1]} entries, A has {A.shape[0]} rows")
    return StandardProblem(A, c_diag, sigma2, y=Y, validate=validate)


class DeqChannelEstimator(BaseEstimator):
    """Deep-equilibrium channel estimator with a Lipschitz-controlled network.

    Parameters
    ----------
    A : ndarray of shape (2M, 2N)
        Partial-orthogonal measurement matrix.
    c_diag : ndarray of shape (2M,), optional
        Diagonal of the noise covariance shape ``C`` (identity when omitted).
    loss : {"gsure", "nmse", "pmse", "mse"}
        ``"gsure"`` trains from measurements only; the others need ``H``.
    lip_target : float
        Lipschitz constant imposed on the network.
    """

    def __init__(self, A=None, c_diag=None, loss="gsure", lip_target=0.9, eta=1.0, tol=1e-4,
                 max_iter=100, epochs=100, batch_size=128, lr=1e-3, lr_decay=(0.5, 30),
                 max_steps=None, probes=1, fd_step_rel=1e-3, channels=(1, 16, 16, 1), kernel=3,
                 init_threshold=1e-3, random_state=0):
        self.A = A
        self.c_diag = c_diag
        self.loss = loss
        self.lip_target = lip_target
        self.eta = eta
        self.tol = tol
        self.max_iter = max_iter
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.max_steps = max_steps
        self.probes = probes
        self.fd_step_rel = fd_step_rel
        self.channels = channels
        self.kernel = kernel
        self.init_threshold = init_threshold
        self.random_state = random_state

    def _deq_config(self):
        return DeqConfig(self.eta, self.tol, self.max_iter, self.lip_target)

    def fit(self, X, y=None, *, sigma2):
        """Train on measurements ``X`` of shape (S, 2M).

        ``y`` holds ground-truth channels (S, 2N); it is required for supervised
        losses and used only for monitoring with ``loss="gsure"``. ``sigma2`` is
        the known noise scale (scalar or per sample).
        """
        if self.A is None:
            raise ValidationError("A must be provided")
        problem = StandardProblem(self.A, self.c_diag, sigma2, y=check_array(X, dtype=float))
        H = None if y is None else check_array(y, dtype=float)
        n2 = problem.A.shape[1]
        model = init_nle(n2, self.channels, self.kernel, self.lip_target, self.init_threshold,
                         rng=self.random_state)
        tcfg = TrainConfig(self.epochs, self.batch_size, self.lr, tuple(self.lr_decay), self.loss,
                           self.random_state, self.max_steps)
        gcfg = GsureConfig(self.probes, self.fd_step_rel)
        result = train(model, problem, tcfg, self._deq_config(), gcfg, H=H)
        self.model_ = spectral_normalize(result.model, exact=True)
        self.history_ = result.history
        self.n_features_in_ = problem.A.shape[0]
        return self

    def solve(self, X):
        """Fixed-point result (estimates plus diagnostics) for measurements ``X``."""
        check_is_fitted(self, "model_")
        problem = _problem(self.A, self.c_diag, X)
        return forward_fixed_point(self.model_, problem, self._deq_config())

    def predict(self, X):
        return self.solve(X).h_star

    def score(self, X, y):
        """Negative NMSE in dB (larger is better)."""
        return -nmse_db(self.predict(X), check_array(y, dtype=float))


class SparseBaselineEstimator(BaseEstimator):
    """OMP, ISTA or AMP behind ``fit``/``predict``; ``fit`` only validates shapes."""

    def __init__(self, A=None, c_diag=None, algorithm="omp", k_target=6, lam=0.01, max_iter=500,
                 damping=0.7, threshold_scale=1.5):
        self.A = A
        self.c_diag = c_diag
        self.algorithm = algorithm
        self.k_target = k_target
        self.lam = lam
        self.max_iter = max_iter
        self.damping = damping
        self.threshold_scale = threshold_scale

    def fit(self, X, y=None):
        if self.algorithm not in ("omp", "ista", "amp"):
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")
        X = check_array(X, dtype=float)
        if self.A is None or X.shape[1] != np.asarray(self.A).shape[0]:
            raise ValidationError("A must be given and match the measurement length")
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "n_features_in_")
        problem = _problem(self.A, self.c_diag, X)
        if self.algorithm == "omp":
            return omp(problem, self.k_target)
        if self.algorithm == "ista":
            return ista(problem, self.lam, self.max_iter)
        return amp(problem, self.max_iter, self.damping, self.threshold_scale)

    def score(self, X, y):
        return -nmse_db(self.predict(X), check_array(y, dtype=float))
