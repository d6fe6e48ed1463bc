"""A small trainable noise predictor with hand-rolled reverse mode.

Architecture is fixed so results are deterministic across runs: the state
vector is concatenated with a 16-dim sinusoidal embedding of t/T, passed
through two tanh layers of width 128, and projected back to state size.
tanh keeps the map C^1 everywhere, so the x0hat VJP is well defined.

File format (``save_denoiser``/``load_denoiser``): one ASCII header line
``DPMCNET1 <D> <H1> <H2> <E>\\n`` followed by raw little-endian float64 in
declaration order: W1 (H1 x (D+E), row-major), b1, W2 (H2 x H1), b2,
W3 (D x H2), b3. The noise schedule is not stored; pair the net with the
schedule it was trained under.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, forward_marginal
from .scores import Denoised

HIDDEN = 128
EMBED = 16

_MAGIC = "DPMCNET1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DenoiserNet:
    """Weights of the noise predictor; immutable once training finishes."""

    dim: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    final_loss: float = float("nan")
    loss_curve: list = field(default_factory=list)

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]


def init_denoiser(dim: int, rng: np.random.Generator) -> DenoiserNet:
    d_in = dim + EMBED

    def w(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(cols)

    return DenoiserNet(
        dim=dim,
        W1=w(HIDDEN, d_in),
        b1=np.zeros(HIDDEN),
        W2=w(HIDDEN, HIDDEN),
        b2=np.zeros(HIDDEN),
        W3=w(dim, HIDDEN),
        b3=np.zeros(dim),
    )


def time_embedding(t, T: int) -> np.ndarray:
    """Sinusoidal features of t/T at frequencies pi * 2^j, j = 0..7."""
    tau = np.asarray(t, dtype=float) / float(T)
    freqs = np.pi * 2.0 ** np.arange(EMBED // 2)
    ang = tau[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _forward(net: DenoiserNet, x: np.ndarray, emb: np.ndarray):
    """Batched forward pass; returns output and the tanh activations."""
    h0 = np.concatenate([x, emb], axis=-1)
    h1 = np.tanh(h0 @ net.W1.T + net.b1)
    h2 = np.tanh(h1 @ net.W2.T + net.b2)
    out = h2 @ net.W3.T + net.b3
    return out, (h0, h1, h2)


def _input_vjp(net: DenoiserNet, acts, v: np.ndarray) -> np.ndarray:
    """v^T d(out)/d(x), dropping the time-embedding columns."""
    _, h1, h2 = acts
    da2 = (v @ net.W3) * (1.0 - h2 * h2)
    da1 = (da2 @ net.W2) * (1.0 - h1 * h1)
    return (da1 @ net.W1)[..., : net.dim]


def _param_grads(net: DenoiserNet, acts, dout: np.ndarray):
    h0, h1, h2 = acts
    da2 = (dout @ net.W3) * (1.0 - h2 * h2)
    da1 = (da2 @ net.W2) * (1.0 - h1 * h1)
    return [
        da1.T @ h0,
        da1.sum(axis=0),
        da2.T @ h1,
        da2.sum(axis=0),
        dout.T @ h2,
        dout.sum(axis=0),
    ]


def denoiser_eps(net: DenoiserNet, x: np.ndarray, t, T: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    xb = np.atleast_2d(x)
    emb = np.broadcast_to(time_embedding(t, T), xb.shape[:-1] + (EMBED,))
    out, _ = _forward(net, xb, emb)
    return out[0] if squeeze else out


def denoiser_eps_vjp(net: DenoiserNet, x: np.ndarray, t, T: int, v: np.ndarray) -> np.ndarray:
    """Exact v^T d(eps)/dx for the implemented forward pass."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    squeeze = x.ndim == 1
    xb, vb = np.atleast_2d(x), np.atleast_2d(v)
    emb = np.broadcast_to(time_embedding(t, T), xb.shape[:-1] + (EMBED,))
    _, acts = _forward(net, xb, emb)
    g = _input_vjp(net, acts, vb)
    return g[0] if squeeze else g


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch: int
    learning_rate: float
    seed: int
    cosine_decay: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValueError("learning_rate must be finite and positive")


def train_denoiser(
    dataset: np.ndarray, schedule: NoiseSchedule, config: TrainConfig
) -> DenoiserNet:
    """Fit the noise predictor by denoising regression over uniform t.

    Plain momentum-free gradient descent; bitwise reproducible given the
    seed and dataset order. Zero epochs returns the initialization.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.size == 0:
        raise ValueError("dataset must be nonempty")
    n, dim = data.shape
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 0x6E6574])))
    net = init_denoiser(dim, rng)
    T = schedule.T
    sqrt_ab = np.sqrt(np.concatenate([[1.0], schedule.bar_alphas]))
    sqrt_1mab = np.sqrt(1.0 - np.concatenate([[1.0], schedule.bar_alphas]))

    for epoch in range(config.epochs):
        lr = config.learning_rate
        if config.cosine_decay:
            lr *= 0.5 * (1.0 + np.cos(np.pi * epoch / max(config.epochs, 1)))
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            x0 = data[idx]
            t = rng.integers(1, T + 1, size=idx.size)
            noise = rng.standard_normal(x0.shape)
            x_t = sqrt_ab[t, None] * x0 + sqrt_1mab[t, None] * noise
            emb = time_embedding(t, T)
            pred, acts = _forward(net, x_t, emb)
            resid = pred - noise
            loss = float(np.mean(np.sum(resid * resid, axis=-1)))
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, batch {n_batches}"
                )
            grads = _param_grads(net, acts, 2.0 * resid / idx.size)
            for p, g in zip(net.params(), grads):
                p -= lr * g
            epoch_loss += loss
            n_batches += 1
        net.loss_curve.append(epoch_loss / max(n_batches, 1))

    net.final_loss = net.loss_curve[-1] if net.loss_curve else float("nan")
    return net


class DenoiserScoreModel:
    """ScoreModel facade over a trained net (valid at t >= 1)."""

    def __init__(self, net: DenoiserNet, schedule: NoiseSchedule):
        self.net = net
        self.schedule = schedule
        self.dim = net.dim

    def eps(self, x: np.ndarray, t: int) -> np.ndarray:
        return denoiser_eps(self.net, x, t, self.schedule.T)

    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        ab = self.schedule.bar_alpha(t)
        if ab >= 1.0:
            raise ValueError("denoiser score undefined at t=0")
        return -self.eps(x, t) / np.sqrt(1.0 - ab)

    def x0hat(self, x: np.ndarray, t: int) -> np.ndarray:
        ab = self.schedule.bar_alpha(t)
        x = np.asarray(x, dtype=float)
        return (x - np.sqrt(1.0 - ab) * self.eps(x, t)) / np.sqrt(ab)

    def x0hat_vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        return self.denoise(x, t).vjp(v)

    def denoise(self, x: np.ndarray, t: int) -> Denoised:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        xb = np.atleast_2d(x)
        T = self.schedule.T
        ab = self.schedule.bar_alpha(t)
        if ab >= 1.0:
            raise ValueError("denoiser model requires t >= 1")
        emb = np.broadcast_to(time_embedding(t, T), xb.shape[:-1] + (EMBED,))
        eps, acts = _forward(self.net, xb, emb)
        score = -eps / np.sqrt(1.0 - ab)
        x0 = (xb - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)

        def vjp(v: np.ndarray) -> np.ndarray:
            vb = np.atleast_2d(np.asarray(v, dtype=float))
            # d(x0hat)/dx = (I - sqrt(1-ab) d(eps)/dx) / sqrt(ab)
            g = (vb - np.sqrt(1.0 - ab) * _input_vjp(self.net, acts, vb)) / np.sqrt(ab)
            return g[0] if squeeze else g

        if squeeze:
            return Denoised(x=x, t=t, eps=eps[0], score=score[0], x0hat=x0[0], vjp=vjp)
        return Denoised(x=xb, t=t, eps=eps, score=score, x0hat=x0, vjp=vjp)


def save_denoiser(net: DenoiserNet, path) -> None:
    with open(path, "wb") as fh:
        header = f"{_MAGIC} {net.dim} {HIDDEN} {HIDDEN} {EMBED}\n"
        fh.write(header.encode("ascii"))
        for p in net.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_denoiser(path) -> DenoiserNet:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 5 or header[0] != _MAGIC:
            raise ValueError(f"not a {_MAGIC} file: {path}")
        dim, h1, h2, emb = map(int, header[1:])
        if h1 != HIDDEN or h2 != HIDDEN or emb != EMBED:
            raise ValueError("unsupported layer widths in net file")
        raw = fh.read()
    shapes = [(h1, dim + emb), (h1,), (h2, h1), (h2,), (dim, h2), (dim,)]
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(float)
        )
        offset += count * 8
    if offset != len(raw):
        raise ValueError("net file has trailing or missing bytes")
    return DenoiserNet(dim, *arrays)
