"""Acceleration / velocity networks with hand-written reverse mode and Adam.

Architecture (two stages):

* stage 1 encodes each input stream separately. Spatial inputs (``x_t`` and
  ``v_tau``) get a per-coordinate sinusoidal feature map followed by a small
  SiLU MLP; time inputs (``t`` and ``tau``) get a sinusoidal embedding and one
  linear layer.
* stage 2 concatenates the stream features and maps them through SiLU linear
  layers to a ``data_dim`` output.

With the default widths the accel network has 304,513 parameters for 1-D data
and 321,154 for 2-D data. The ``velocity`` variant drops the ``v_tau``/``tau``
streams and is the plain rectified-flow field ``v(x_t, t)``.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from .dists import make_rng

__all__ = [
    "NetConfig",
    "AccelModel",
    "OptimizerState",
    "NonFiniteError",
    "preset_config",
    "forward",
    "loss_and_grad",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1
_BLOCK = 128


class NonFiniteError(FloatingPointError):
    """Raised when a model input, output, loss or ODE state stops being finite."""


@dataclass(frozen=True)
class NetConfig:
    data_dim: int
    variant: str = "accel"
    spatial_embed_dim: int = 128
    spatial_width: int = 64
    spatial_layers: int = 2
    time_embed_dim: int = 128
    time_width: int = 320
    hidden_width: int = 256
    n_hidden_layers: int = 1
    spatial_freq_scale: float = 2.0
    time_freq_scale: float = 100.0
    freq_base: float = 10000.0

    def __post_init__(self):
        if self.variant not in ("accel", "velocity"):
            raise ValueError(f"variant must be 'accel' or 'velocity', got {self.variant!r}")
        for name in ("data_dim", "spatial_width", "spatial_layers", "time_width",
                     "hidden_width", "n_hidden_layers", "spatial_embed_dim", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.spatial_embed_dim % 2 or self.time_embed_dim % 2:
            raise ValueError("embedding sizes must be even")

    @property
    def spatial_streams(self) -> tuple[str, ...]:
        return ("x", "v") if self.variant == "accel" else ("x",)

    @property
    def time_streams(self) -> tuple[str, ...]:
        return ("t", "tau") if self.variant == "accel" else ("t",)

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        d, es, hs = self.data_dim, self.spatial_embed_dim, self.spatial_width
        shapes = []
        for s in self.spatial_streams:
            fan_in = d * es
            for k in range(self.spatial_layers):
                shapes += [(f"{s}{k}.W", (fan_in, hs)), (f"{s}{k}.b", (hs,))]
                fan_in = hs
        for s in self.time_streams:
            shapes += [(f"{s}0.W", (self.time_embed_dim, self.time_width)), (f"{s}0.b", (self.time_width,))]
        concat = hs * len(self.spatial_streams) + self.time_width * len(self.time_streams)
        fan_in = concat
        for k in range(self.n_hidden_layers):
            shapes += [(f"h{k}.W", (fan_in, self.hidden_width)), (f"h{k}.b", (self.hidden_width,))]
            fan_in = self.hidden_width
        shapes += [("out.W", (fan_in, d)), ("out.b", (d,))]
        return shapes

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def to_dict(self) -> dict:
        return asdict(self)


def preset_config(data_dim: int, variant: str = "accel") -> NetConfig:
    """Default network for 1-D or 2-D synthetic data."""
    return NetConfig(data_dim=data_dim, variant=variant)


def _sinusoid(u: np.ndarray, dim: int, scale: float, base: float) -> np.ndarray:
    """Interleaved sin/cos features of the values in ``u``; shape ``u.shape + (dim,)``."""
    half = dim // 2
    freqs = scale * base ** (-np.arange(half, dtype=np.float64) / half)
    arg = u[..., None] * freqs.astype(u.dtype)
    out = np.empty(u.shape + (dim,), dtype=u.dtype)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def _mm(h: np.ndarray, W: np.ndarray) -> np.ndarray:
    # fixed-height gemm calls keep each row's rounding independent of batch size
    n = h.shape[0]
    out = np.empty((n, W.shape[1]), dtype=np.result_type(h, W))
    for s in range(0, n, _BLOCK):
        blk = h[s:s + _BLOCK]
        m = blk.shape[0]
        if m < _BLOCK:
            pad = np.zeros((_BLOCK, h.shape[1]), dtype=h.dtype)
            pad[:m] = blk
            blk = pad
        out[s:s + m] = (blk @ W)[:m]
    return out


def _time_array(val, n, name, dtype):
    arr = np.asarray(val, dtype=dtype)
    scalar = arr.ndim == 0
    arr = arr.reshape(-1)
    if not scalar and arr.size != n:
        raise ValueError(f"{name} must be a scalar or have one entry per row")
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"{name} must lie in [0, 1]")
    return arr


def _sigmoid(z):
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


class AccelModel:
    """Parameter vector plus the network it parameterizes.

    ``params`` is one flat array; weights are views into it, so in-place
    optimizer updates are seen by the forward pass.
    """

    def __init__(self, config: NetConfig, params: np.ndarray):
        self.config = config
        params = np.ascontiguousarray(params)
        if params.ndim != 1 or params.size != config.param_count:
            raise ValueError(f"expected {config.param_count} parameters, got {params.size}")
        self.params = params
        self._views = {}
        off = 0
        for name, shape in config.layout():
            size = int(np.prod(shape))
            self._views[name] = params[off:off + size].reshape(shape)
            off += size

    @classmethod
    def init(cls, config: NetConfig, seed: int = 0, dtype=np.float32) -> "AccelModel":
        """Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = make_rng(seed, 0xA11)
        chunks = []
        layout = config.layout()
        fan_in = {}
        for name, shape in layout:
            if name.endswith(".W"):
                fan_in[name[:-2]] = shape[0]
        for name, shape in layout:
            bound = 1.0 / np.sqrt(fan_in[name[:-2]])
            chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
        return cls(config, np.concatenate(chunks).astype(dtype))

    @property
    def param_count(self) -> int:
        return self.params.size

    @property
    def dtype(self):
        return self.params.dtype

    def copy(self) -> "AccelModel":
        return AccelModel(self.config, self.params.copy())

    def astype(self, dtype) -> "AccelModel":
        return AccelModel(self.config, self.params.astype(dtype))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __call__(self, x_t, t, v_tau=None, tau=None) -> np.ndarray:
        return forward(self, x_t, t, v_tau, tau)

    # -- internals ---------------------------------------------------------

    def _inputs(self, x_t, t, v_tau, tau):
        cfg = self.config
        dt = self.dtype
        x = np.asarray(x_t, dtype=dt)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if cfg.data_dim == 1 else x.reshape(1, -1)
        if x.ndim != 2 or x.shape[1] != cfg.data_dim:
            raise ValueError(f"x_t must have {cfg.data_dim} columns")
        n = x.shape[0]
        spatial = {"x": x}
        times = {"t": t}
        if cfg.variant == "accel":
            if v_tau is None or tau is None:
                raise ValueError("accel model needs v_tau and tau")
            v = np.asarray(v_tau, dtype=dt).reshape(n, cfg.data_dim)
            spatial["v"] = v
            times["tau"] = tau
        out_t = {k: _time_array(val, n, k, dt) for k, val in times.items()}
        for k, a in list(spatial.items()) + list(out_t.items()):
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"non-finite values in input {k!r}")
        return n, spatial, out_t

    def _stream(self, s, u, n, cache=None):
        """Features of one input stream and their contribution to the first trunk layer."""
        cfg = self.config
        if s in cfg.spatial_streams:
            h = _sinusoid(u, cfg.spatial_embed_dim, cfg.spatial_freq_scale, cfg.freq_base).reshape(n, -1)
            n_layers = cfg.spatial_layers
        else:
            h = _sinusoid(u, cfg.time_embed_dim, cfg.time_freq_scale, cfg.freq_base)
            n_layers = 1
        for k in range(n_layers):
            z = _mm(h, self[f"{s}{k}.W"]) + self[f"{s}{k}.b"]
            sg = _sigmoid(z)
            if cache is not None:
                cache.append((f"{s}{k}", h, z, sg))
            h = z * sg
        sl = self._rows[s]
        return h, sl, _mm(h, self["h0.W"][sl])

    @property
    def _rows(self):
        cfg = self.config
        rows, off = {}, 0
        for s in cfg.spatial_streams:
            rows[s] = slice(off, off + cfg.spatial_width)
            off += cfg.spatial_width
        for s in cfg.time_streams:
            rows[s] = slice(off, off + cfg.time_width)
            off += cfg.time_width
        return rows

    def _encode(self, n, spatial, times, cache=None):
        """Stream features and the pre-activation of the first trunk layer."""
        cfg = self.config
        parts, c = [], {}
        for s in cfg.spatial_streams + cfg.time_streams:
            u = spatial[s] if s in spatial else times[s]
            h, sl, c[s] = self._stream(s, u, n, cache)
            parts.append((s, h, sl))
        return parts, self._combine(c)

    def _combine(self, c):
        # a scalar time leaves its stream with one row that broadcasts; the
        # summation order is fixed so every path rounds identically
        cfg = self.config
        spatial_sum = c["x"] if cfg.variant == "velocity" else c["x"] + c["v"]
        time_sum = c["t"] if cfg.variant == "velocity" else c["t"] + c["tau"]
        return spatial_sum + (time_sum + self["h0.b"])

    def bind(self, x_t, t):
        """Freeze ``(x_t, t)`` and return ``f(v_tau, tau)``.

        Equal bit for bit to calling the model with the same inputs, but the
        location and time streams are computed once, which is what the inner
        velocity ODE needs.
        """
        if self.config.variant != "accel":
            raise ValueError("bind is only defined for the accel variant")
        dummy_v = np.zeros_like(np.asarray(x_t, dtype=self.dtype))
        n, spatial, times = self._inputs(x_t, t, dummy_v, 0.0)
        fixed = {"x": self._stream("x", spatial["x"], n)[2], "t": self._stream("t", times["t"], n)[2]}

        def f(v_tau, tau):
            v = np.asarray(v_tau, dtype=self.dtype).reshape(n, self.config.data_dim)
            tau = _time_array(tau, n, "tau", self.dtype)
            if not (np.all(np.isfinite(v)) and np.all(np.isfinite(tau))):
                raise NonFiniteError("non-finite values in v_tau or tau")
            c = dict(fixed)
            c["v"] = self._stream("v", v, n)[2]
            c["tau"] = self._stream("tau", tau, n)[2]
            out = self._head(self._combine(c))
            if not np.all(np.isfinite(out)):
                raise NonFiniteError("model produced non-finite output")
            return out

        return f

    def _head(self, z0, cache=None):
        cfg = self.config
        sg = _sigmoid(z0)
        if cache is not None:
            cache.append(("h0", None, z0, sg))
        h = z0 * sg
        for k in range(1, cfg.n_hidden_layers):
            z = _mm(h, self[f"h{k}.W"]) + self[f"h{k}.b"]
            sg = _sigmoid(z)
            if cache is not None:
                cache.append((f"h{k}", h, z, sg))
            h = z * sg
        if cache is not None:
            cache.append(("out", h, None, None))
        return _mm(h, self["out.W"]) + self["out.b"]


def forward(model: AccelModel, x_t, t, v_tau=None, tau=None) -> np.ndarray:
    """Predicted acceleration (or velocity for the ``velocity`` variant), one row per input row.

    ``t`` and ``tau`` may be scalars shared by every row or arrays with one
    entry per row. The velocity variant ignores ``v_tau`` and ``tau``.
    """
    if model.config.variant == "velocity":
        v_tau = tau = None
    n, spatial, times = model._inputs(x_t, t, v_tau, tau)
    _, z0 = model._encode(n, spatial, times)
    out = model._head(z0)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("model produced non-finite output")
    return out


def loss_and_grad(model: AccelModel, x_t, t, v_tau, tau, target) -> tuple[float, np.ndarray]:
    """Mean over rows of the squared error ``||target - model(...)||^2`` and its gradient.

    The gradient is taken exactly by reverse mode over the flat parameter
    vector and returned in the model's dtype.
    """
    cfg = model.config
    if cfg.variant == "velocity":
        v_tau = tau = None
    n, spatial, times = model._inputs(x_t, t, v_tau, tau)
    if n == 0:
        raise ValueError("empty batch")
    # per-row time inputs in training so every row owns its cache entry
    times = {k: np.broadcast_to(v, (n,)) if v.size == 1 else v for k, v in times.items()}
    cache: list = []
    parts, z0 = model._encode(n, spatial, times, cache)
    pred = model._head(z0, cache)
    target = np.asarray(target, dtype=model.dtype).reshape(pred.shape)
    resid = pred - target
    loss = float(np.mean(np.sum(resid.astype(np.float64) ** 2, axis=1)))
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")

    grad = np.zeros_like(model.params)
    g = AccelModel(cfg, grad)  # views into grad
    entries = {name: (h, z, sg) for name, h, z, sg in cache}

    d = (2.0 / n) * resid
    h_last = entries["out"][0]
    g["out.W"][...] = h_last.T @ d
    g["out.b"][...] = d.sum(axis=0)
    dh = d @ model["out.W"].T
    for k in range(cfg.n_hidden_layers - 1, 0, -1):
        h_in, z, sg = entries[f"h{k}"]
        dz = dh * _silu_grad(z, sg)
        g[f"h{k}.W"][...] = h_in.T @ dz
        g[f"h{k}.b"][...] = dz.sum(axis=0)
        dh = dz @ model[f"h{k}.W"].T
    _, z, sg = entries["h0"]
    dz0 = dh * _silu_grad(z, sg)
    g["h0.b"][...] = dz0.sum(axis=0)
    W0 = model["h0.W"]
    for s, h, sl in parts:
        g["h0.W"][sl] = h.T @ dz0
        dh_s = dz0 @ W0[sl].T
        n_layers = cfg.spatial_layers if s in cfg.spatial_streams else 1
        for k in range(n_layers - 1, -1, -1):
            h_in, z, sg = entries[f"{s}{k}"]
            dz = dh_s * _silu_grad(z, sg)
            g[f"{s}{k}.W"][...] = h_in.T @ dz
            g[f"{s}{k}.b"][...] = dz.sum(axis=0)
            if k:
                dh_s = dz @ model[f"{s}{k}.W"].T
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("gradient is not finite")
    return loss, grad


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_model(cls, model: AccelModel, **kw) -> "OptimizerState":
        return cls(np.zeros_like(model.params), np.zeros_like(model.params), **kw)


def optimizer_step(state: OptimizerState, model: AccelModel, grad: np.ndarray):
    """One Adam update of ``model.params`` in place; returns ``(model, state)``."""
    if grad.shape != model.params.shape or state.m.shape != model.params.shape:
        raise ValueError("gradient / optimizer state size does not match the model")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    lr_t = state.learning_rate * np.sqrt(1 - b2**state.step) / (1 - b1**state.step)
    model.params -= (lr_t * state.m / (np.sqrt(state.v) + state.epsilon)).astype(model.dtype)
    return model, state


def save_checkpoint(path, model: AccelModel, meta: dict | None = None,
                    opt_state: OptimizerState | None = None) -> Path:
    """Write an ``.npz`` checkpoint.

    Layout: ``params`` (flat), ``header`` (UTF-8 JSON with ``format_version``,
    ``net_config`` and caller metadata), and optionally ``adam_m``, ``adam_v``
    and the Adam step/hyperparameters inside the header.
    """
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": model.config.to_dict(),
        "dtype": str(model.dtype),
        "meta": meta or {},
    }
    arrays = {"params": model.params}
    if opt_state is not None:
        header["adam"] = {
            "step": opt_state.step,
            "learning_rate": opt_state.learning_rate,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "epsilon": opt_state.epsilon,
        }
        arrays["adam_m"] = opt_state.m
        arrays["adam_v"] = opt_state.v
    raw = json.dumps(header, sort_keys=True).encode()
    arrays["header"] = np.frombuffer(raw, dtype=np.uint8)
    # np.savez stamps members with the wall clock; a fixed date keeps files byte-identical
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[AccelModel, dict, OptimizerState | None]:
    with np.load(Path(path)) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')!r}")
        model = AccelModel(NetConfig(**header["net_config"]), z["params"].copy())
        opt = None
        if "adam" in header:
            opt = OptimizerState(z["adam_m"].copy(), z["adam_v"].copy(), **header["adam"])
    return model, header["meta"], opt
