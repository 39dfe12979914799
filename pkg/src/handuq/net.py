"""Desk-scale trainable regressor: a small dense feature extractor with
one of four output heads.

* deterministic -- mean only,
* diagonal      -- mean + per-dimension log-variance,
* full          -- a single head emitting mean + precision factor A,
* structured    -- mean + log-variance + an input-independent shared
                   square matrix W mixing the per-dimension variances.

Everything is plain numpy with hand-written backpropagation; gradients
are validated against finite differences in the tests.  Training uses
AdamW (decoupled weight decay) and is bit-deterministic given the seed:
initialization, batch shuffling and sample draws each consume their own
named substream derived from the seed.
"""

import base64
import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from . import gaussian_core, loss_heads
from .errors import (
    IncompatibleCheckpoint,
    NotPositiveDefinite,
    ShapeError,
    TrainingDiverged,
)
from .gaussian_core import Diagonal, GaussianBelief, PrecisionFactor, Structured
from .loss_heads import clamp_log_var

HEAD_KINDS = ("deterministic", "diagonal", "full", "structured")
CHECKPOINT_FORMAT = "handuq.checkpoint.v1"
TRACE_HEADER = "iteration,total,deter,nll,mse"


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    d_f: int = 1024
    d_o: int = 63
    head_kind: str = "structured"
    n_samples: int = 25
    hidden_layers: tuple = (64,)

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        for name in ("d_in", "d_f", "d_o", "n_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lambda_nll: float = loss_heads.DEFAULT_LAMBDA_NLL
    lambda_mse: float = loss_heads.DEFAULT_LAMBDA_MSE
    freeze_w: bool = False
    freeze_sigma_against_mse: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("invalid optimizer hyperparameters")
        if self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("invalid optimizer hyperparameters")
        if self.lambda_nll < 0 or self.lambda_mse < 0:
            raise ValueError("loss weights must be >= 0")


def head_param_count(kind: str, d_f: int, d_o: int) -> int:
    """Weight count of the output head (biases excluded)."""
    if d_f < 1 or d_o < 1:
        raise ValueError("d_f and d_o must be >= 1")
    if kind == "deterministic":
        return d_f * d_o
    if kind == "diagonal":
        return 2 * d_f * d_o
    if kind == "full":
        return d_f * (d_o + d_o * d_o)
    if kind == "structured":
        return 2 * d_f * d_o + d_o * d_o
    raise ValueError(f"unknown head kind {kind!r}")


@dataclass
class ModelParams:
    config: ModelConfig
    values: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.values.items()})


def _substream(seed: int, name: str) -> np.random.Generator:
    # named substreams keep parameter draws independent of which other
    # parameters exist, so e.g. the mean path is seed-identical across heads
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode()),))
    )


def init_params(
    cfg: ModelConfig,
    seed: int,
    log_var_bias: float = 0.0,
    a_scale: float = 1.0,
) -> ModelParams:
    """Draw initial parameters.

    ``log_var_bias`` seeds the log-variance head bias (typically the log of
    the marginal target variance) and ``a_scale`` scales the identity
    initialization of the precision factor so A @ A.T starts near a
    data-scaled multiple of I.
    """
    values: dict[str, np.ndarray] = {}
    widths = [cfg.d_in, *cfg.hidden_layers, cfg.d_f]
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        rng = _substream(seed, f"init.fe{i}")
        values[f"fe{i}.w"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        values[f"fe{i}.b"] = np.zeros(fan_out)
    if cfg.head_kind == "full":
        rng = _substream(seed, "init.head.full")
        out_dim = cfg.d_o + cfg.d_o * cfg.d_o
        values["full.w"] = rng.normal(0.0, 0.01 / np.sqrt(cfg.d_f), size=(out_dim, cfg.d_f))
        bias = np.zeros(out_dim)
        bias[cfg.d_o :] = (a_scale * np.eye(cfg.d_o)).reshape(-1)
        values["full.b"] = bias
    else:
        rng = _substream(seed, "init.head.mean")
        values["mean.w"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_f), size=(cfg.d_o, cfg.d_f))
        values["mean.b"] = np.zeros(cfg.d_o)
        if cfg.head_kind in ("diagonal", "structured"):
            rng = _substream(seed, "init.head.logvar")
            values["logvar.w"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_f), size=(cfg.d_o, cfg.d_f))
            values["logvar.b"] = np.full(cfg.d_o, float(log_var_bias))
        if cfg.head_kind == "structured":
            values["shared_w"] = np.eye(cfg.d_o)
    return ModelParams(cfg, values)


def _num_feature_layers(cfg: ModelConfig) -> int:
    return len(cfg.hidden_layers) + 1


def _feature_forward(params: ModelParams, x: np.ndarray):
    acts = [x]
    h = x
    for i in range(_num_feature_layers(params.config)):
        h = np.tanh(h @ params.values[f"fe{i}.w"].T + params.values[f"fe{i}.b"])
        acts.append(h)
    return h, acts


def _feature_backward(params: ModelParams, acts, d_feat: np.ndarray, grads: dict) -> None:
    d = d_feat
    for i in reversed(range(_num_feature_layers(params.config))):
        out, inp = acts[i + 1], acts[i]
        dz = d * (1.0 - out * out)
        grads[f"fe{i}.w"] = dz.T @ inp
        grads[f"fe{i}.b"] = dz.sum(axis=0)
        d = dz @ params.values[f"fe{i}.w"]


def forward(params: ModelParams, x) -> GaussianBelief:
    """Single-input forward pass to a Gaussian belief (mean-only for the
    deterministic head)."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.d_in,):
        raise ShapeError(f"expected input of shape ({cfg.d_in},), got {x.shape}")
    feat, _ = _feature_forward(params, x[None, :])
    if cfg.head_kind == "full":
        out = (feat @ params.values["full.w"].T + params.values["full.b"])[0]
        mu = out[: cfg.d_o]
        a = out[cfg.d_o :].reshape(cfg.d_o, cfg.d_o)
        return GaussianBelief(mu, PrecisionFactor(a))
    mu = (feat @ params.values["mean.w"].T + params.values["mean.b"])[0]
    if cfg.head_kind == "deterministic":
        return GaussianBelief(mu, None)
    s_raw = (feat @ params.values["logvar.w"].T + params.values["logvar.b"])[0]
    s, _ = clamp_log_var(s_raw)
    var = np.exp(s)
    if cfg.head_kind == "diagonal":
        return GaussianBelief(mu, Diagonal(var))
    return GaussianBelief(mu, Structured(params.values["shared_w"], var))


def batch_forward(params: ModelParams, x: np.ndarray) -> dict:
    """Vectorized forward pass; returns the head outputs as arrays."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise ShapeError(f"expected inputs of shape (n, {cfg.d_in}), got {x.shape}")
    feat, _ = _feature_forward(params, x)
    out: dict[str, np.ndarray] = {}
    if cfg.head_kind == "full":
        raw = feat @ params.values["full.w"].T + params.values["full.b"]
        out["mu"] = raw[:, : cfg.d_o]
        out["a"] = raw[:, cfg.d_o :].reshape(-1, cfg.d_o, cfg.d_o)
        return out
    out["mu"] = feat @ params.values["mean.w"].T + params.values["mean.b"]
    if cfg.head_kind == "deterministic":
        return out
    s, _ = clamp_log_var(feat @ params.values["logvar.w"].T + params.values["logvar.b"])
    out["var"] = np.exp(s)
    if cfg.head_kind == "structured":
        out["w"] = params.values["shared_w"]
    return out


def batch_joint_uncertainty(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Per-joint trace uncertainty for a batch, shape (n, d_o/3)."""
    cfg = params.config
    out = batch_forward(params, x)
    n = x.shape[0]
    if cfg.head_kind == "deterministic":
        diag = np.zeros((n, cfg.d_o))
    elif cfg.head_kind == "diagonal":
        diag = out["var"]
    elif cfg.head_kind == "structured":
        # diag of W diag(var) W^T is var @ (W*W)^T, no need for the full matrix
        diag = out["var"] @ (out["w"] * out["w"]).T
    else:
        diag = np.empty((n, cfg.d_o))
        eye = np.eye(cfg.d_o)
        for i in range(n):
            a = out["a"][i]
            psi = a @ a.T
            try:
                cho = scipy.linalg.cho_factor(psi, lower=True)
                diag[i] = np.diagonal(scipy.linalg.cho_solve(cho, eye))
            except scipy.linalg.LinAlgError as exc:
                raise NotPositiveDefinite("predicted precision is singular") from exc
    return diag.reshape(n, -1, gaussian_core.JOINT_DIM).sum(axis=2)


def batch_loss_and_grads(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    lambda_nll: float,
    lambda_mse: float,
    eps: np.ndarray | None = None,
    freeze_sigma_against_mse: bool = False,
):
    """Batch-mean objective and analytic gradients for every parameter.

    total = deter + lambda_nll * nll + lambda_mse * mse, where deter is the
    mean-squared-error surrogate on the predicted mean, nll is the head's
    NLL (diagonal for diagonal/structured heads, precision-form for the
    full head) and mse is the reparameterized-sample term, active for
    heads with a diagonal variance path when ``eps`` is supplied
    (shape (batch, n_samples, d_o); held fixed for gradients).
    """
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b = x.shape[0]
    if y.shape != (b, cfg.d_o):
        raise ShapeError(f"targets must have shape ({b}, {cfg.d_o}), got {y.shape}")
    feat, acts = _feature_forward(params, x)
    grads: dict[str, np.ndarray] = {}
    parts = {"deter": 0.0, "nll": 0.0, "mse": 0.0}

    if cfg.head_kind == "full":
        raw = feat @ params.values["full.w"].T + params.values["full.b"]
        mu = raw[:, : cfg.d_o]
        a = raw[:, cfg.d_o :].reshape(b, cfg.d_o, cfg.d_o)
        r = y - mu
        parts["deter"] = float(np.sum(r * r) / b)
        d_mu = 2.0 * (mu - y) / b
        sign, logabs = np.linalg.slogdet(a)
        if np.any(sign == 0):
            raise NotPositiveDefinite("precision factor A became singular")
        t = np.einsum("bji,bj->bi", a, r)  # A^T r
        parts["nll"] = float((0.5 * np.sum(t * t) - np.sum(logabs)) / b)
        psi_r = np.einsum("bij,bj->bi", a, t)
        d_mu = d_mu + lambda_nll * (-psi_r) / b
        a_inv_t = np.linalg.inv(a).transpose(0, 2, 1)
        d_a = (np.einsum("bi,bj->bij", r, t) - a_inv_t) / b
        d_raw = np.concatenate([d_mu, (lambda_nll * d_a).reshape(b, -1)], axis=1)
        grads["full.w"] = d_raw.T @ feat
        grads["full.b"] = d_raw.sum(axis=0)
        d_feat = d_raw @ params.values["full.w"]
        _feature_backward(params, acts, d_feat, grads)
        parts["total"] = loss_heads.combined_loss(
            parts["deter"], parts["nll"], parts["mse"], lambda_nll, lambda_mse
        )
        return parts, grads

    mu = feat @ params.values["mean.w"].T + params.values["mean.b"]
    r = y - mu
    parts["deter"] = float(np.sum(r * r) / b)
    d_mu = 2.0 * (mu - y) / b
    d_s = None

    if cfg.head_kind in ("diagonal", "structured"):
        s_raw = feat @ params.values["logvar.w"].T + params.values["logvar.b"]
        s, interior = clamp_log_var(s_raw)
        var = np.exp(s)
        parts["nll"] = float(np.sum(r * r / (2.0 * var) + 0.5 * s) / b)
        d_mu = d_mu + lambda_nll * (-r / var) / b
        d_s = lambda_nll * (0.5 - r * r / (2.0 * var)) * interior / b

        use_mse = eps is not None and lambda_mse > 0.0
        if use_mse:
            if eps.shape[0] != b or eps.shape[2] != cfg.d_o:
                raise ShapeError(f"eps must have shape ({b}, n, {cfg.d_o}), got {eps.shape}")
            n_s = eps.shape[1]
            sigma = np.exp(0.5 * s)
            z = sigma[:, None, :] * eps
            w = params.values.get("shared_w")
            zy = z @ w.T if w is not None else z
            rm = (mu[:, None, :] + zy) - y[:, None, :]
            parts["mse"] = float(np.sum(rm * rm) / (b * n_s))
            g_hat = 2.0 * rm / (b * n_s)
            d_mu = d_mu + lambda_mse * g_hat.sum(axis=1)
            if w is not None:
                grads["shared_w"] = lambda_mse * np.einsum("bni,bnk->ik", g_hat, z)
                t_back = g_hat @ w
            else:
                t_back = g_hat
            if not freeze_sigma_against_mse:
                d_sigma = np.sum(t_back * eps, axis=1)
                d_s = d_s + lambda_mse * d_sigma * (0.5 * sigma) * interior

        grads["logvar.w"] = d_s.T @ feat
        grads["logvar.b"] = d_s.sum(axis=0)

    grads["mean.w"] = d_mu.T @ feat
    grads["mean.b"] = d_mu.sum(axis=0)
    d_feat = d_mu @ params.values["mean.w"]
    if d_s is not None:
        d_feat = d_feat + d_s @ params.values["logvar.w"]
    _feature_backward(params, acts, d_feat, grads)
    if cfg.head_kind == "structured" and "shared_w" not in grads:
        grads["shared_w"] = np.zeros_like(params.values["shared_w"])
    parts["total"] = loss_heads.combined_loss(
        parts["deter"], parts["nll"], parts["mse"], lambda_nll, lambda_mse
    )
    return parts, grads


class AdamW:
    """Adam with decoupled weight decay, applied uniformly to all tensors."""

    def __init__(self, values: dict, cfg: TrainConfig):
        self.values = values
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in values.items()}
        self.v = {k: np.zeros_like(v) for k, v in values.items()}

    def step(self, grads: dict, skip: frozenset = frozenset()) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in self.values.items():
            if name in skip:
                continue
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            if cfg.weight_decay:
                p *= 1.0 - cfg.lr * cfg.weight_decay
            p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


@dataclass
class TrainResult:
    params: ModelParams
    trace: np.ndarray  # (iterations, 5): iteration, total, deter, nll, mse


def train(data, mcfg: ModelConfig, tcfg: TrainConfig) -> TrainResult:
    """Mini-batch AdamW on the combined objective; deterministic per seed.

    ``data`` is an (inputs, targets) pair of arrays with shapes
    (n, d_in) and (n, d_o).  The log-variance head bias starts at the log
    of the marginal target variance and the precision factor at a
    matching multiple of I, so every head begins at the data's scale.
    """
    x, y = data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] < 1:
        raise ShapeError("data must be a nonempty (inputs, targets) pair")
    if x.shape[1] != mcfg.d_in or y.shape[1] != mcfg.d_o:
        raise ShapeError(
            f"data dims {x.shape[1]}/{y.shape[1]} do not match config "
            f"{mcfg.d_in}/{mcfg.d_o}"
        )
    n = x.shape[0]
    vbar = float(np.mean(np.var(y, axis=0)))
    if not np.isfinite(vbar) or vbar <= 0.0:
        vbar = 1.0
    params = init_params(mcfg, tcfg.seed, log_var_bias=np.log(vbar), a_scale=1.0 / np.sqrt(vbar))
    opt = AdamW(params.values, tcfg)
    shuffle_rng = _substream(tcfg.seed, "shuffle")
    eps_rng = _substream(tcfg.seed, "eps")
    draw_eps = mcfg.head_kind in ("diagonal", "structured") and tcfg.lambda_mse > 0.0
    skip = frozenset(("shared_w",)) if tcfg.freeze_w else frozenset()
    trace = np.zeros((tcfg.iterations, 5))
    order = shuffle_rng.permutation(n)
    cursor = 0
    for it in range(tcfg.iterations):
        if cursor + tcfg.batch_size > n:
            order = shuffle_rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + min(tcfg.batch_size, n)]
        cursor += tcfg.batch_size
        eps = None
        if draw_eps:
            eps = eps_rng.standard_normal((idx.shape[0], mcfg.n_samples, mcfg.d_o))
        try:
            parts, grads = batch_loss_and_grads(
                params,
                x[idx],
                y[idx],
                tcfg.lambda_nll,
                tcfg.lambda_mse,
                eps=eps,
                freeze_sigma_against_mse=tcfg.freeze_sigma_against_mse,
            )
        except NotPositiveDefinite as exc:
            raise TrainingDiverged(it, f"iteration {it}: {exc}") from exc
        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(it)
        trace[it] = (it, parts["total"], parts["deter"], parts["nll"], parts["mse"])
        opt.step(grads, skip=skip)
    return TrainResult(params=params, trace=trace)


def save_checkpoint(path, params: ModelParams) -> None:
    """Versioned JSON container; arrays are row-major float64, base64."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model": asdict(params.config),
        "params": {
            name: {
                "shape": list(arr.shape),
                "data": base64.b64encode(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).decode("ascii"),
            }
            for name, arr in params.values.items()
        },
    }
    doc["model"]["hidden_layers"] = list(params.config.hidden_layers)
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"unrecognized checkpoint format: {doc.get('format')!r}")
    model = dict(doc["model"])
    model["hidden_layers"] = tuple(model.get("hidden_layers", ()))
    cfg = ModelConfig(**model)
    values = {}
    for name, entry in doc["params"].items():
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype=np.float64)
        values[name] = arr.reshape(entry["shape"]).copy()
    return ModelParams(cfg, values)


def save_trace_csv(path, trace: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(TRACE_HEADER + "\n")
        for row in trace:
            fh.write(
                f"{int(row[0])},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]!r}\n"
            )


def load_trace_csv(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != TRACE_HEADER:
            raise IncompatibleCheckpoint(f"bad trace header: {header!r}")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    return np.array(rows, dtype=np.float64)
