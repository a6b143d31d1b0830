"""Dataset loaders, random projection and synthetic data generators."""

from importlib import resources

import numpy as np
from scipy.special import ndtr


class ParseError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__("%s:%d: %s" % (path, lineno, message))
        self.path = path
        self.lineno = lineno


def load_cancer_mortality():
    """The 20 (y_j, n_j) city pairs used for the beta-binomial example.

    Returns
    -------
    y, n : ndarray of int
    """
    text = resources.files(__package__).joinpath("data/cancermortality.csv").read_text()
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    table = np.array([[int(v) for v in r.split(",")] for r in rows[1:]])
    return table[:, 0], table[:, 1]


def load_libsvm(path, n_features=None):
    """Read a LibSVM/SVMlight text file into dense arrays.

    Lines are ``label idx:value idx:value ...`` with 1-based indices. Labels
    are mapped to {0, 1}: anything positive becomes 1.

    Parameters
    ----------
    path : str or Path
    n_features : int, optional
        Number of columns; inferred from the largest index if omitted.

    Returns
    -------
    X : ndarray of shape (N, d)
    y : ndarray of shape (N,)
    """
    labels, rows, cols, vals = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                labels.append(float(parts[0]))
            except ValueError:
                raise ParseError(path, lineno, "bad label %r" % parts[0]) from None
            i = len(labels) - 1
            for tok in parts[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    j = int(idx)
                    v = float(val)
                except ValueError:
                    raise ParseError(path, lineno, "bad feature %r" % tok) from None
                if not sep or j < 1:
                    raise ParseError(path, lineno, "bad feature %r" % tok)
                rows.append(i)
                cols.append(j - 1)
                vals.append(v)
    d = (max(cols) + 1 if cols else 0) if n_features is None else n_features
    if cols and max(cols) >= d:
        raise ValueError("feature index %d exceeds n_features=%d" % (max(cols) + 1, d))
    X = np.zeros((len(labels), d))
    X[rows, cols] = vals
    y = (np.asarray(labels) > 0).astype(float)
    return X, y


def save_libsvm(path, X, y):
    with open(path, "w") as fh:
        for xi, yi in zip(X, y):
            nz = np.flatnonzero(xi)
            feats = " ".join("%d:%s" % (j + 1, repr(float(xi[j]))) for j in nz)
            fh.write(("+1" if yi > 0 else "-1") + (" " + feats if feats else "") + "\n")


def random_project(X, k, seed):
    """Project the columns of X onto k random Gaussian directions.

    Projection entries are iid ``N(0, 1/k)`` so squared norms are preserved
    in expectation.
    """
    X = np.asarray(X, dtype=float)
    if k > X.shape[1]:
        raise ValueError("cannot project %d features onto %d > d dimensions" % (X.shape[1], k))
    rng = np.random.default_rng(seed)
    R = rng.normal(0.0, 1.0 / np.sqrt(k), size=(X.shape[1], k))
    return X @ R


def add_bias_column(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def load_matrix(path, center=True):
    """Whitespace-delimited numeric matrix, one observation per row.

    Columns are centred to zero mean by default. No whitening is applied.
    """
    try:
        X = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from None
    if center:
        X = X - X.mean(axis=0)
    return X


def synth_probit(N, d, seed, prior_var=100.0):
    """Simulate a probit regression dataset from its own prior.

    Returns
    -------
    X : ndarray (N, d), standard normal rows
    y : ndarray (N,) of {0, 1}
    beta_true : ndarray (d,)
    """
    if N < 1 or d < 1:
        raise ValueError("N and d must be positive")
    rng = np.random.default_rng(seed)
    beta = rng.normal(0.0, np.sqrt(prior_var), size=d)
    X = rng.normal(size=(N, d))
    y = (rng.uniform(size=N) < ndtr(X @ beta)).astype(float)
    return X, y, beta


# attribute cardinalities of the binarised UCI adult features (sum to 123)
ADULT_GROUPS = (5, 8, 5, 16, 5, 7, 14, 6, 5, 2, 2, 2, 5, 41)


def synth_adult_like(N, seed):
    """Sparse one-hot binary features shaped like the a9a benchmark.

    Each row picks one level per categorical attribute (123 binary columns in
    total, about 14 active), and labels follow a logistic model with about a
    quarter positives. Used when the real file is not available.
    """
    rng = np.random.default_rng(seed)
    d = sum(ADULT_GROUPS)
    X = np.zeros((N, d))
    start = 0
    for size in ADULT_GROUPS:
        p = rng.dirichlet(np.full(size, 0.7))
        X[np.arange(N), start + rng.choice(size, size=N, p=p)] = 1.0
        start += size
    w = rng.normal(0.0, 1.0, size=d)
    a = X @ w
    a = a - np.quantile(a, 0.76)
    y = (rng.uniform(size=N) < 1.0 / (1.0 + np.exp(-a))).astype(float)
    return X, y


def synth_meg_like(N, d, seed):
    """Linear mixture of d heavy-tailed sources, centred.

    Stand-in for the MEG recordings: sources are logistic-distributed (whose
    density is exactly the ``1/(4 cosh(y/2))`` source model), mixed by a
    random well-conditioned matrix.

    Returns
    -------
    X : ndarray (N, d)
    A : ndarray (d, d), the mixing matrix
    """
    rng = np.random.default_rng(seed)
    S = rng.logistic(size=(N, d))
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    A = Q @ np.diag(rng.uniform(0.5, 2.0, size=d))
    X = S @ A.T
    return X - X.mean(axis=0), A
