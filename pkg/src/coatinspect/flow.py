"""Per-scale normalizing flows over cell descriptors.

Each pyramid level gets a stack of affine coupling layers, each preceded by
a fixed channel permutation. A coupling keeps the first half ``x_A`` and maps
the second half as ``y_B = x_B * exp(s) + t`` where ``(s_raw, t)`` come from a
one-hidden-layer tanh perceptron of ``x_A`` and ``s = clamp * tanh(s_raw / clamp)``.
The base density is a standard normal, so

    log p(f) = sum_d log N(z_d; 0, 1) + sum_layers sum(s).

Gradients of the mean negative log-likelihood are derived by hand (no
autodiff) and trained with Adam on flat parameter vectors.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from .features import FeatureMap, FeatureNormStats, FeaturePyramid, normalize
from .imops import box_mean3, sample_bilinear

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MAGIC = b"CFM1"
FORMAT_VERSION = 1


class FlowError(ValueError):
    pass


class FlowDivergenceError(FlowError):
    pass


class ModelFormatError(ValueError):
    pass


class FlowStack:
    """Permutation + affine-coupling stack over ``dim`` channels.

    Parameters live in one flat float64 vector; per-layer weights are views into it.
    """

    def __init__(self, dim: int, depth: int = 8, hidden: int = 32, clamp: float = 2.0,
                 seed: int = 0, perms: Optional[Sequence[Sequence[int]]] = None):
        if dim < 2:
            raise FlowError("coupling needs at least 2 channels")
        if depth < 1:
            raise FlowError("depth must be >= 1")
        self.dim, self.depth, self.hidden, self.clamp = dim, depth, hidden, float(clamp)
        self.d_a = dim // 2
        self.d_b = dim - self.d_a
        rng = np.random.default_rng(seed)
        if perms is None:
            perms = [rng.permutation(dim) for _ in range(depth)]
        self.perms = [np.asarray(p, dtype=np.int64) for p in perms]
        for p in self.perms:
            if sorted(p.tolist()) != list(range(dim)):
                raise FlowError("permutation is not a bijection")
        self.inv_perms = [np.argsort(p) for p in self.perms]

        self.shapes = [("w1", (self.d_a, hidden)), ("b1", (hidden,)),
                       ("w2", (hidden, 2 * self.d_b)), ("b2", (2 * self.d_b,))]
        per_layer = sum(int(np.prod(s)) for _, s in self.shapes)
        self.params = np.zeros(depth * per_layer)
        self.layers = self._views(self.params)
        # identity at start: output layer zero, hidden layer random
        for lw in self.layers:
            lw["w1"][...] = rng.standard_normal(lw["w1"].shape) / math.sqrt(self.d_a)

    def _views(self, flat: np.ndarray) -> List[dict]:
        layers, off = [], 0
        for _ in range(self.depth):
            lw = {}
            for name, shape in self.shapes:
                n = int(np.prod(shape))
                lw[name] = flat[off:off + n].reshape(shape)
                off += n
            layers.append(lw)
        return layers

    def set_params(self, flat: np.ndarray) -> None:
        if flat.shape != self.params.shape:
            raise FlowError(f"expected {self.params.shape[0]} parameters, got {flat.shape[0]}")
        self.params[...] = flat

    def copy(self) -> "FlowStack":
        other = FlowStack(self.dim, self.depth, self.hidden, self.clamp, perms=self.perms)
        other.set_params(self.params.copy())
        return other

    # -- evaluation ---------------------------------------------------------

    def _st(self, lw, xa):
        pre = xa @ lw["w1"] + lw["b1"]
        act = np.tanh(pre)
        out = act @ lw["w2"] + lw["b2"]
        th = np.tanh(out[:, :self.d_b] / self.clamp)
        return act, th, self.clamp * th, out[:, self.d_b:]

    @staticmethod
    def _check(x):
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise FlowError("non-finite input to flow")
        return x

    def forward(self, x: np.ndarray):
        """x: (N, dim) or (dim,). Returns (z, logdet)."""
        x = self._check(x)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.dim:
            raise FlowError(f"expected {self.dim} channels, got {h.shape[1]}")
        logdet = np.zeros(len(h))
        for lw, perm in zip(self.layers, self.perms):
            h = h[:, perm]
            xa, xb = h[:, :self.d_a], h[:, self.d_a:]
            _, _, s, t = self._st(lw, xa)
            h = np.concatenate([xa, xb * np.exp(s) + t], axis=1)
            logdet += s.sum(axis=1)
        return (h[0], logdet[0]) if single else (h, logdet)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = self._check(z)
        single = z.ndim == 1
        h = np.atleast_2d(z)
        if h.shape[1] != self.dim:
            raise FlowError(f"expected {self.dim} channels, got {h.shape[1]}")
        for lw, inv in zip(reversed(self.layers), reversed(self.inv_perms)):
            ya, yb = h[:, :self.d_a], h[:, self.d_a:]
            _, _, s, t = self._st(lw, ya)
            h = np.concatenate([ya, (yb - t) * np.exp(-s)], axis=1)[:, inv]
        return h[0] if single else h

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        z, logdet = self.forward(x)
        return -0.5 * np.sum(z * z, axis=-1) - 0.5 * self.dim * LOG_2PI + logdet

    def mean_nll(self, x: np.ndarray) -> float:
        return float(-np.mean(self.log_prob(np.atleast_2d(x))))

    # -- gradient -----------------------------------------------------------

    def nll_and_grad(self, x: np.ndarray):
        """Mean negative log-likelihood of a batch and its gradient w.r.t. ``params``."""
        x = self._check(x)
        x = np.atleast_2d(x)
        n = len(x)
        if n == 0:
            raise FlowError("empty batch")
        h = x
        cache = []
        logdet = np.zeros(n)
        for lw, perm in zip(self.layers, self.perms):
            h = h[:, perm]
            xa, xb = h[:, :self.d_a], h[:, self.d_a:]
            act, th, s, t = self._st(lw, xa)
            e = np.exp(s)
            h = np.concatenate([xa, xb * e + t], axis=1)
            logdet += s.sum(axis=1)
            cache.append((xa, xb, act, th, e))
        z = h
        nll = float(np.mean(0.5 * np.sum(z * z, axis=1) + 0.5 * self.dim * LOG_2PI - logdet))

        grad = np.zeros_like(self.params)
        gviews = self._views(grad)
        g = z / n
        inv_n = 1.0 / n
        for l in range(self.depth - 1, -1, -1):
            lw, gw = self.layers[l], gviews[l]
            xa, xb, act, th, e = cache[l]
            ga, gb = g[:, :self.d_a], g[:, self.d_a:]
            d_xb = gb * e
            d_s = gb * xb * e - inv_n
            d_out = np.concatenate([d_s * (1.0 - th * th), gb], axis=1)
            gw["w2"][...] = act.T @ d_out
            gw["b2"][...] = d_out.sum(axis=0)
            d_pre = (d_out @ lw["w2"].T) * (1.0 - act * act)
            gw["w1"][...] = xa.T @ d_pre
            gw["b1"][...] = d_pre.sum(axis=0)
            d_xa = ga + d_pre @ lw["w1"].T
            g_perm = np.concatenate([d_xa, d_xb], axis=1)
            g = g_perm[:, self.inv_perms[l]]
        return nll, grad


def random_stack(dim: int, depth: int, hidden: int = 8, clamp: float = 2.0,
                 seed: int = 0, scale: float = 0.5) -> FlowStack:
    """A stack with every weight drawn from N(0, scale^2); for testing."""
    stack = FlowStack(dim, depth, hidden, clamp, seed=seed)
    rng = np.random.default_rng(seed + 1)
    stack.set_params(rng.standard_normal(stack.params.shape) * scale)
    return stack


def log_likelihood(stack: FlowStack, f: np.ndarray) -> np.ndarray:
    return stack.log_prob(f)


class Adam:
    def __init__(self, size: int, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 256
    depth: int = 8
    hidden: int = 32
    clamp: float = 2.0
    seed: int = 0
    noise_std: float = 0.05
    max_cells: int = 0
    lambdas: Optional[tuple] = None
    calibrate_lambda: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown flow config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("lambdas") is not None:
            d["lambdas"] = tuple(float(v) for v in d["lambdas"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = None if self.lambdas is None else list(self.lambdas)
        return d


def train_stack(x: np.ndarray, cfg: TrainConfig, seed: int, dim: Optional[int] = None,
                stack: Optional[FlowStack] = None):
    """Fit one flow to rows of ``x`` by minibatch Adam on the mean NLL.

    Returns (stack, log) where log[0] is the NLL before any update and log[e]
    the full-data NLL after epoch e.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise FlowError("empty training set")
    if stack is None:
        stack = FlowStack(x.shape[1] if dim is None else dim, cfg.depth, cfg.hidden, cfg.clamp, seed=seed)
    rng = np.random.default_rng(seed + 7919)
    opt = Adam(stack.params.size, cfg.lr, (cfg.beta1, cfg.beta2))
    history = [stack.mean_nll(x)]
    bs = max(1, cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), bs):
            batch = x[order[start:start + bs]]
            if cfg.noise_std > 0:
                batch = batch + cfg.noise_std * rng.standard_normal(batch.shape)
            nll, grad = stack.nll_and_grad(batch)
            if not (np.isfinite(nll) and np.all(np.isfinite(grad))):
                raise FlowDivergenceError(
                    f"non-finite NLL/gradient at epoch {epoch + 1}, step {start // bs} "
                    f"(last full-data NLL {history[-1]:.4f})")
            opt.step(stack.params, grad)
        nll = stack.mean_nll(x)
        if not np.isfinite(nll):
            raise FlowDivergenceError(f"NLL diverged after epoch {epoch + 1}")
        history.append(nll)
    return stack, history


@dataclass
class FlowModel:
    stacks: List[FlowStack]
    lam: np.ndarray
    norm_stats: FeatureNormStats
    feature_config: dict
    preprocess_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    training_log: List[List[float]] = field(default_factory=list)
    thresholds: Optional[dict] = None
    postprocess: dict = field(default_factory=lambda: {"min_area": 20})
    calibration: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if len(self.lam) != len(self.stacks):
            raise FlowError("need one lambda per level")
        if np.any(self.lam < 0) or abs(self.lam.sum() - 1.0) > 1e-9:
            raise FlowError("lambdas must be non-negative and sum to 1")


def _training_matrix(pyramids: Sequence[FeaturePyramid], level: int) -> np.ndarray:
    return np.concatenate([p.levels[level].valid_vectors() for p in pyramids])


def train(pyramids: Sequence[FeaturePyramid], cfg: TrainConfig, norm_stats: FeatureNormStats,
          feature_config: dict, labels: Optional[Sequence[str]] = None) -> FlowModel:
    """Train one flow per pyramid level on the valid cells of normalized good pyramids."""
    if len(pyramids) == 0:
        raise FlowError("empty training set")
    if labels is not None and any(lb != "good" for lb in labels):
        raise FlowError("training data must be labeled good")
    normed = [normalize(p, norm_stats) for p in pyramids]
    n_levels = len(normed[0].levels)
    stacks, logs = [], []
    for i in range(n_levels):
        x = _training_matrix(normed, i)
        if cfg.max_cells and len(x) > cfg.max_cells:
            pick = np.random.default_rng(cfg.seed + 31 * i).choice(len(x), cfg.max_cells, replace=False)
            x = x[np.sort(pick)]
        log.info("level %d: training on %d cells", i, len(x))
        stack, hist = train_stack(x, cfg, seed=cfg.seed + 1000 * i)
        # weights are stored as float32; round now so reloaded models score identically
        stack.params[...] = stack.params.astype(np.float32).astype(np.float64)
        stacks.append(stack)
        logs.append(hist)
        log.info("level %d: NLL %.4f -> %.4f", i, hist[0], hist[-1])
    lam = np.full(n_levels, 1.0 / n_levels) if cfg.lambdas is None else np.asarray(cfg.lambdas)
    return FlowModel(stacks, lam, norm_stats, dict(feature_config), train_config=cfg.to_dict(),
                     training_log=logs)


# ---------------------------------------------------------------------------
# scoring


@dataclass
class AnomalyMap:
    data: np.ndarray                 # (S, S), higher = more anomalous
    valid: np.ndarray                # (S, S) coating pixels
    per_level: Optional[List[np.ndarray]] = None

    @property
    def shape(self):
        return self.data.shape


def level_scores(stack: FlowStack, fmap: FeatureMap) -> np.ndarray:
    """-log p per cell; invalid cells are 0."""
    out = np.zeros(fmap.valid.shape)
    if fmap.valid.any():
        out[fmap.valid] = -stack.log_prob(fmap.data[fmap.valid])
    return out


def upsample_cells(values: np.ndarray, valid: np.ndarray, cell: int, size: int) -> np.ndarray:
    """Bilinear cell-grid -> pixel upsampling that ignores invalid cells."""
    u = (np.arange(size) + 0.5) / cell - 0.5
    gx, gy = np.meshgrid(u, u)
    w = valid.astype(np.float64)
    num = sample_bilinear(values * w, gx, gy, mode="edge")
    den = sample_bilinear(w, gx, gy, mode="edge")
    return np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)


def combine_levels(level_maps: Sequence[np.ndarray], lam: Sequence[float]) -> np.ndarray:
    out = np.zeros_like(level_maps[0])
    for m, l in zip(level_maps, lam):
        out = out + l * m
    return out


def anomaly_map(model: FlowModel, pyr: FeaturePyramid) -> AnomalyMap:
    """Per-pixel anomaly score: lambda-weighted sum of upsampled per-level -log p.

    Pixels outside the pyramid's coating mask score 0.
    """
    if len(pyr.levels) != len(model.stacks):
        raise FlowError(f"pyramid has {len(pyr.levels)} levels, model expects {len(model.stacks)}")
    for lv, st in zip(pyr.levels, model.stacks):
        if lv.dim != st.dim:
            raise FlowError(f"feature dim {lv.dim} does not match model dim {st.dim}")
    mask = pyr.mask if pyr.mask is not None else np.ones((pyr.crop_size, pyr.crop_size), dtype=bool)
    normed = normalize(pyr, model.norm_stats)
    per_level = []
    for stack, lv in zip(model.stacks, normed.levels):
        cells = level_scores(stack, lv)
        up = upsample_cells(cells, lv.valid, lv.cell, pyr.crop_size)
        per_level.append(np.where(mask, up, 0.0))
    combined = combine_levels(per_level, model.lam)
    return AnomalyMap(combined, mask.copy(), per_level)


def image_score(amap: AnomalyMap) -> float:
    """Peak of the 3x3-mean-smoothed map over coating pixels."""
    if not amap.valid.any():
        raise FlowError("anomaly map has no coating pixels")
    return float(box_mean3(amap.data)[amap.valid].max())


# ---------------------------------------------------------------------------
# persistence


def _header(model: FlowModel) -> dict:
    layout = []
    for i, st in enumerate(model.stacks):
        for l in range(st.depth):
            for name, shape in st.shapes:
                layout.append({"level": i, "layer": l, "name": name, "shape": list(shape)})
    return {
        "schema_version": 1,
        "architecture": [{"dim": st.dim, "depth": st.depth, "hidden": st.hidden, "clamp": st.clamp,
                          "perms": [p.tolist() for p in st.perms]} for st in model.stacks],
        "param_layout": layout,
        "lambda": model.lam.tolist(),
        "norm_stats": model.norm_stats.to_json(),
        "feature_config": model.feature_config,
        "preprocess_config": model.preprocess_config,
        "train_config": model.train_config,
        "training_log": model.training_log,
        "thresholds": model.thresholds,
        "postprocess": model.postprocess,
        "calibration": model.calibration,
    }


def model_to_bytes(model: FlowModel) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    blob = np.concatenate([st.params for st in model.stacks]).astype("<f4").tobytes()
    return (MAGIC + struct.pack("<HI", FORMAT_VERSION, len(header)) + header
            + blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def model_from_bytes(raw: bytes) -> FlowModel:
    if raw[:4] != MAGIC:
        raise ModelFormatError("bad magic: not a coating-flow model file")
    if len(raw) < 10:
        raise ModelFormatError("truncated model file")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    off = 10
    if len(raw) < off + hlen:
        raise ModelFormatError("truncated model header")
    try:
        header = json.loads(raw[off:off + hlen])
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from exc
    off += hlen
    stacks = []
    for arch in header["architecture"]:
        stacks.append(FlowStack(arch["dim"], arch["depth"], arch["hidden"], arch["clamp"],
                                perms=arch["perms"]))
    n = sum(st.params.size for st in stacks)
    if len(raw) != off + 4 * n + 4:
        raise ModelFormatError(f"truncated parameter blob (expected {4 * n} bytes)")
    blob = raw[off:off + 4 * n]
    (crc,) = struct.unpack_from("<I", raw, off + 4 * n)
    if zlib.crc32(blob) & 0xFFFFFFFF != crc:
        raise ModelFormatError("parameter checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    pos = 0
    for st in stacks:
        st.set_params(flat[pos:pos + st.params.size])
        pos += st.params.size
    return FlowModel(stacks=stacks, lam=np.array(header["lambda"]),
                     norm_stats=FeatureNormStats.from_json(header["norm_stats"]),
                     feature_config=header["feature_config"],
                     preprocess_config=header.get("preprocess_config", {}),
                     train_config=header.get("train_config", {}),
                     training_log=header.get("training_log", []),
                     thresholds=header.get("thresholds"),
                     postprocess=header.get("postprocess", {"min_area": 20}),
                     calibration=header.get("calibration", {}))


def save_model(model: FlowModel, path) -> None:
    from .core import atomic_write_bytes

    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> FlowModel:
    from pathlib import Path

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(2, "no such model file", str(p))
    return model_from_bytes(p.read_bytes())
