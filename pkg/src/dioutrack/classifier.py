"""Two-layer convolutional target classifier, trained online by least squares.

The network is f(z) = phi2(w2 * phi1(w1 * z)): a 1x1 convolution mixing the
C feature channels into D intermediate channels, a rectifier, a 4x4
convolution down to a single confidence channel, and an exponential-linear
output stage (identity above zero) that keeps the model C1-smooth where the
final activation matters.

Training minimizes sum_i weight_i ||f(z_i) - y_i||^2 + reg_weight ||w||^2
against Gaussian-shaped labels y_i, via the matrix-free Gauss-Newton/CG
solver. The residual problem below supplies hand-derived Jacobian-vector and
vector-Jacobian products (the "two backprops" per CG iteration).

The 4x4 convolution is anchored so output cell (i, j) reads input cells
(i-1..i+2, j-1..j+2), zero padded; fixed for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .features import FeatureMap
from .leastsq import GnConfig, SolveReport, solve_nlls, solve_nlls_gd

__all__ = [
    "ClassifierWeights",
    "ClassifierConfig",
    "TrainSample",
    "SampleMemory",
    "ClassifierProblem",
    "gaussian_label",
    "forward",
    "init_weights",
    "train_initial",
    "update_periodic",
]


@dataclass(frozen=True)
class ClassifierWeights:
    """w1: (D, C) channel mixer, w2: (D, 4, 4) spatial kernel, alpha: output ELU shape."""

    w1: np.ndarray
    w2: np.ndarray
    alpha: float

    def __post_init__(self) -> None:
        if self.w1.ndim != 2 or self.w2.shape != (self.w1.shape[0], 4, 4):
            raise ValueError(f"inconsistent weight shapes {self.w1.shape}, {self.w2.shape}")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass
class ClassifierConfig:
    intermediate_channels: int = 16
    alpha: float = 0.05
    reg_weight: float = 0.01
    label_sigma: float = 2.0
    memory_size: int = 50
    init_gn_rounds: int = 6
    init_cg_iters: int = 10
    update_gn_rounds: int = 1
    update_cg_iters: int = 5
    update_period: int = 10
    optimizer: str = "gncg"  # "gncg" | "gd" (equal-budget steepest descent)
    # Reject (and halve) Gauss-Newton steps that raise the loss. The raw
    # always-accept recipe oscillates on this saturating architecture; see
    # GnConfig. Kept as a switch so the unconditional behavior stays testable.
    accept_all_steps: bool = False

    def __post_init__(self) -> None:
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.label_sigma <= 0:
            raise ValueError("label_sigma must be > 0")
        if self.intermediate_channels < 1:
            raise ValueError("intermediate_channels must be >= 1")
        if self.optimizer not in ("gncg", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class TrainSample:
    features: FeatureMap
    label: np.ndarray  # (H, W), Gaussian-shaped, values in [0, 1]
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.label.shape != self.features.values.shape[1:]:
            raise ValueError(
                f"label shape {self.label.shape} does not match feature grid "
                f"{self.features.values.shape[1:]}")
        if self.weight < 0:
            raise ValueError("sample weight must be >= 0")


@dataclass
class SampleMemory:
    """Initial samples are kept forever; later ones live in a ring buffer."""

    capacity: int
    permanent: list[TrainSample] = field(default_factory=list)
    recent: list[TrainSample] = field(default_factory=list)

    def append(self, sample: TrainSample) -> None:
        self.recent.append(sample)
        if len(self.recent) > self.capacity:
            del self.recent[0]

    def samples(self) -> list[TrainSample]:
        return self.permanent + self.recent


def gaussian_label(peak: tuple[float, float], dims: tuple[int, int],
                   sigma: float) -> np.ndarray:
    """Gaussian bump exp(-d^2 / 2 sigma^2) peaking at (col, row) = peak."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    h, w = dims
    u, v = peak
    cols = np.arange(w) - u
    rows = np.arange(h) - v
    d2 = rows[:, None] ** 2 + cols[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _elu(t: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(t > 0, t, alpha * np.expm1(np.minimum(t, 0.0) / alpha))


def _elu_deriv(t: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(t > 0, 1.0, np.exp(np.minimum(t, 0.0) / alpha))


def _conv4(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Correlate (N, D, H, W) with (D, 4, 4), summing channels -> (N, H, W)."""
    n, d, h, w = x.shape
    # channel-last padded copy so the inner contraction runs on contiguous data
    xp = np.zeros((n, h + 3, w + 3, d))
    xp[:, 1:1 + h, 1:1 + w, :] = x.transpose(0, 2, 3, 1)
    out = np.zeros((n, h, w))
    for a in range(4):
        for b in range(4):
            out += xp[:, a:a + h, b:b + w, :] @ k[:, a, b]
    return out


def _conv4_adj_input(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of _conv4 in its input: (N, H, W) x (D, 4, 4) -> (N, D, H, W)."""
    n, h, w = g.shape
    gp = np.zeros((n, h + 3, w + 3))
    gp[:, 2:2 + h, 2:2 + w] = g
    out = np.zeros((n, k.shape[0], h, w))
    for a in range(4):
        for b in range(4):
            out += k[None, :, 3 - a, 3 - b, None, None] * gp[:, None, a:a + h, b:b + w]
    return out


def _conv4_grad_kernel(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of sum(g * _conv4(x, k)) in k: -> (D, 4, 4)."""
    n, d, h, w = x.shape
    xp = np.zeros((n, d, h + 3, w + 3))
    xp[:, :, 1:1 + h, 1:1 + w] = x
    out = np.empty((d, 4, 4))
    for a in range(4):
        for b in range(4):
            out[:, a, b] = np.einsum("ndhw,nhw->d", xp[:, :, a:a + h, b:b + w], g)
    return out


def _im2col4(x: np.ndarray) -> np.ndarray:
    """Unfold 4x4 windows of (N, D, H, W) into an (N*H*W, D*16) matrix.

    Row (n, i, j) holds the padded inputs that _conv4's output cell (i, j)
    reads, ordered (d, a, b) to match a (D, 4, 4) kernel raveled row-major,
    so _conv4(x, k).ravel() == _im2col4(x) @ k.ravel().
    """
    n, d, h, w = x.shape
    xp = np.zeros((n, d, h + 3, w + 3))
    xp[:, :, 1:1 + h, 1:1 + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (4, 4), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, d * 16)


def _forward_batch(w1: np.ndarray, w2: np.ndarray, alpha: float,
                   feats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (pre1, a1, pre2, out) for a (N, C, H, W) feature stack."""
    pre1 = np.einsum("dc,nchw->ndhw", w1, feats, optimize=True)
    a1 = np.maximum(pre1, 0.0)
    pre2 = _conv4(a1, w2)
    return pre1, a1, pre2, _elu(pre2, alpha)


def forward(weights: ClassifierWeights, features: FeatureMap | np.ndarray) -> np.ndarray:
    """Confidence map (H, W) for one feature map."""
    z = features.values if isinstance(features, FeatureMap) else np.asarray(features)
    if z.ndim != 3 or z.shape[0] != weights.w1.shape[1]:
        raise ValueError(
            f"feature stack {z.shape} does not match w1 input channels {weights.w1.shape[1]}")
    return _forward_batch(weights.w1, weights.w2, weights.alpha, z[None])[3][0]


class ClassifierProblem:
    """Least-squares residual for the classifier over a fixed sample batch.

    Residual layout: the weighted per-cell errors of every sample, followed by
    sqrt(reg_weight) times the optimized parameter block. `optimize` selects
    the parameter vector: both layers jointly, or the 4x4 layer only (the
    periodic-update case, with w1 frozen).

    The network output is linearized once per parameter point (keyed on the
    object identity of wvec, matching the solver's calling pattern) into an
    explicit (n_cells, n_params) Jacobian factor: im2col columns of the
    rectified intermediate activations for the 4x4 block, and per-(d, c)
    basis responses for the 1x1 block. jvp/vjp are then a matmul and its
    transpose, exact adjoints by construction.
    """

    def __init__(self, samples: list[TrainSample], config: ClassifierConfig,
                 base: ClassifierWeights, optimize: str = "both") -> None:
        if not samples:
            raise ValueError("need at least one training sample")
        if optimize not in ("both", "w2"):
            raise ValueError(f"unknown optimize mode {optimize!r}")
        shapes = {s.features.values.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent sample shapes: {sorted(shapes)}")

        self.feats = np.stack([s.features.values for s in samples])  # (N, C, H, W)
        self.labels = np.stack([s.label for s in samples])
        self.sqrt_weights = np.sqrt([s.weight for s in samples])[:, None, None]
        self.alpha = base.alpha
        self.reg_sqrt = float(np.sqrt(config.reg_weight))
        self.optimize = optimize
        self.d, self.c = base.w1.shape
        self.w1_fixed = base.w1 if optimize == "w2" else None

        n, _, h, w = self.feats.shape
        self.n_params = self.d * 16 if optimize == "w2" else self.d * self.c + self.d * 16
        self.n_residuals = n * h * w + self.n_params
        self._fwd_key: np.ndarray | None = None
        self._fwd: tuple | None = None
        self._jac_key: np.ndarray | None = None
        self._jac: np.ndarray | None = None

    def pack(self, weights: ClassifierWeights) -> np.ndarray:
        if self.optimize == "w2":
            return weights.w2.ravel().copy()
        return np.concatenate([weights.w1.ravel(), weights.w2.ravel()])

    def unpack(self, wvec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.optimize == "w2":
            return self.w1_fixed, wvec.reshape(self.d, 4, 4)
        n1 = self.d * self.c
        return wvec[:n1].reshape(self.d, self.c), wvec[n1:].reshape(self.d, 4, 4)

    def to_weights(self, wvec: np.ndarray) -> ClassifierWeights:
        w1, w2 = self.unpack(wvec)
        return ClassifierWeights(w1=w1.copy(), w2=w2.copy(), alpha=self.alpha)

    def _forward(self, wvec: np.ndarray):
        if self._fwd is not None and self._fwd_key is wvec:
            return self._fwd
        w1, w2 = self.unpack(wvec)
        pre1, a1, pre2, out = _forward_batch(w1, w2, self.alpha, self.feats)
        self._fwd_key = wvec
        self._fwd = (pre1, a1, pre2, out)
        return self._fwd

    def _jacobian(self, wvec: np.ndarray) -> np.ndarray:
        """Explicit (n_cells, n_params) factor of d(pre2)/d(params) at wvec.

        Built lazily: residual-only evaluations (e.g. step backtracking) never
        pay for it. One build per Gauss-Newton round in practice.
        """
        if self._jac is not None and self._jac_key is wvec:
            return self._jac
        w1, w2 = self.unpack(wvec)
        pre1, a1, _, _ = self._forward(wvec)
        n, _, h, w = self.feats.shape

        cols_w2 = _im2col4(a1)  # (n*h*w, d*16)
        if self.optimize == "w2":
            jac = cols_w2
        else:
            # dw1 block: column (d, c) is the 4x4 convolution of
            # (relu_mask_d * z_c) with kernel w2_d; accumulated per tap (a, b)
            masked = np.where((pre1 >= 0.0)[:, :, None], self.feats[:, None], 0.0)
            mp = np.zeros((n, self.d, self.c, h + 3, w + 3))
            mp[:, :, :, 1:1 + h, 1:1 + w] = masked
            acc = np.zeros((n, self.d, self.c, h, w))
            for a in range(4):
                for b in range(4):
                    acc += w2[:, None, a, b, None, None] * mp[:, :, :, a:a + h, b:b + w]
            cols_w1 = acc.transpose(0, 3, 4, 1, 2).reshape(n * h * w, self.d * self.c)
            jac = np.concatenate([cols_w1, cols_w2], axis=1)

        self._jac_key = wvec
        self._jac = jac
        return jac

    def residual(self, wvec: np.ndarray) -> np.ndarray:
        out = self._forward(wvec)[3]
        data = (self.sqrt_weights * (out - self.labels)).ravel()
        return np.concatenate([data, self.reg_sqrt * wvec])

    def jvp(self, wvec: np.ndarray, p: np.ndarray) -> np.ndarray:
        if p.shape != (self.n_params,):
            raise ValueError(f"direction has shape {p.shape}, expected ({self.n_params},)")
        pre2 = self._forward(wvec)[2]
        jac = self._jacobian(wvec)
        dout = (jac @ p).reshape(self.labels.shape) * _elu_deriv(pre2, self.alpha)
        return np.concatenate([(self.sqrt_weights * dout).ravel(), self.reg_sqrt * p])

    def vjp(self, wvec: np.ndarray, u: np.ndarray) -> np.ndarray:
        if u.shape != (self.n_residuals,):
            raise ValueError(f"cotangent has shape {u.shape}, expected ({self.n_residuals},)")
        pre2 = self._forward(wvec)[2]
        jac = self._jacobian(wvec)
        n_data = self.n_residuals - self.n_params
        g = (u[:n_data].reshape(self.labels.shape) * self.sqrt_weights) \
            * _elu_deriv(pre2, self.alpha)
        return jac.T @ g.ravel() + self.reg_sqrt * u[n_data:]


def init_weights(channels: int, config: ClassifierConfig,
                 rng: np.random.Generator) -> ClassifierWeights:
    """Random rectifier basis with a near-zero output layer.

    w1 is drawn at unit fan-in scale so the intermediate activations span the
    features; w2 starts two orders smaller so the output pre-activation sits
    in the linear region of the output stage (|pre2| << alpha). That keeps the
    first Gauss-Newton linearization well conditioned: a saturated output
    stage would crush the Jacobian and leave the regularizer to drag the
    weights into the zero saddle.
    """
    d = config.intermediate_channels
    w1 = rng.normal(0.0, 1.0 / np.sqrt(channels), size=(d, channels))
    w2 = rng.normal(0.0, 0.01 / np.sqrt(16.0 * d), size=(d, 4, 4))
    return ClassifierWeights(w1=w1, w2=w2, alpha=config.alpha)


def _optimize(problem: ClassifierProblem, w0: np.ndarray, config: ClassifierConfig,
              gn_rounds: int, cg_iters: int) -> tuple[np.ndarray, SolveReport]:
    if config.optimizer == "gd":
        return solve_nlls_gd(problem, w0, iterations=gn_rounds * cg_iters)
    return solve_nlls(problem, w0,
                      GnConfig(outer_iterations=gn_rounds, cg_iterations=cg_iters,
                               always_accept=config.accept_all_steps))


def train_initial(samples: list[TrainSample], config: ClassifierConfig,
                  rng: np.random.Generator) -> tuple[ClassifierWeights, SolveReport]:
    """Train both layers jointly on the first-frame sample set."""
    channels = samples[0].features.channels
    w0 = init_weights(channels, config, rng)
    problem = ClassifierProblem(samples, config, w0, optimize="both")
    wvec, report = _optimize(problem, problem.pack(w0), config,
                             config.init_gn_rounds, config.init_cg_iters)
    return problem.to_weights(wvec), report


def update_periodic(weights: ClassifierWeights, memory: SampleMemory,
                    new_sample: TrainSample, frame_index: int,
                    config: ClassifierConfig) -> tuple[ClassifierWeights, SolveReport | None]:
    """Append the sample; re-optimize the 4x4 layer on schedule frames only."""
    if frame_index < 1:
        raise ValueError("frame_index must be >= 1")
    memory.append(new_sample)
    if frame_index % config.update_period != 0:
        return weights, None
    problem = ClassifierProblem(memory.samples(), config, weights, optimize="w2")
    wvec, report = _optimize(problem, problem.pack(weights), config,
                             config.update_gn_rounds, config.update_cg_iters)
    return replace(weights, w2=wvec.reshape(weights.w2.shape).copy()), report
