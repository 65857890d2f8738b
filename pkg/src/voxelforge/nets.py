"""Actor-critic network over one-hot voxel grids, with exact gradients.

Architecture: two same-padded 3D conv layers (4 kernels of 3^3, then one
kernel of 5^3, ReLU) shared by both heads, flattened to a rho^3 feature
vector; an actor MLP with two tanh hidden layers emitting the action
mean and log standard deviation from a single 2*A-wide head; a critic
MLP of the same shape emitting a scalar value.

Convolutions run through real FFTs, which is substantially faster than
direct summation at these sizes and exactly linear, so the hand-written
reverse-mode gradients below are exact up to rounding. Parameters are
float32 for training; a float64 copy supports finite-difference checks.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.fft import irfftn, next_fast_len, rfftn

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 2.0
HEAD_SCALE = 0.01  # shrink output heads so untrained mu ~ 0, log sigma ~ 0

CONV1_KERNELS = 4
CONV1_SIZE = 3
CONV2_SIZE = 5

PARAM_NAMES = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b",
    "pi_w1", "pi_b1", "pi_w2", "pi_b2", "pi_w3", "pi_b3",
    "v_w1", "v_b1", "v_w2", "v_b2", "v_w3", "v_b3",
)

_FFT_AXES = (-3, -2, -1)


def param_shapes(
    resolution: int, num_materials: int, hidden_width: int, action_dim: int
) -> dict[str, tuple[int, ...]]:
    features = resolution**3
    return {
        "conv1_w": (CONV1_KERNELS, num_materials, CONV1_SIZE, CONV1_SIZE, CONV1_SIZE),
        "conv1_b": (CONV1_KERNELS,),
        "conv2_w": (1, CONV1_KERNELS, CONV2_SIZE, CONV2_SIZE, CONV2_SIZE),
        "conv2_b": (1,),
        "pi_w1": (features, hidden_width),
        "pi_b1": (hidden_width,),
        "pi_w2": (hidden_width, hidden_width),
        "pi_b2": (hidden_width,),
        "pi_w3": (hidden_width, 2 * action_dim),
        "pi_b3": (2 * action_dim,),
        "v_w1": (features, hidden_width),
        "v_b1": (hidden_width,),
        "v_w2": (hidden_width, hidden_width),
        "v_b2": (hidden_width,),
        "v_w3": (hidden_width, 1),
        "v_b3": (1,),
    }


@dataclass
class PolicyParams:
    """All network tensors, keyed by PARAM_NAMES in a fixed order."""

    resolution: int
    num_materials: int
    hidden_width: int
    action_dim: int
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["pi_w1"].dtype

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.resolution, self.num_materials, self.hidden_width,
            self.action_dim, {k: v.copy() for k, v in self.tensors.items()},
        )

    def astype(self, dtype) -> "PolicyParams":
        return PolicyParams(
            self.resolution, self.num_materials, self.hidden_width,
            self.action_dim, {k: v.astype(dtype) for k, v in self.tensors.items()},
        )


def _xavier_limit(shape: tuple[int, ...]) -> float:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[2:]))
        fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def initialize(
    rng: np.random.Generator,
    resolution: int,
    num_materials: int,
    hidden_width: int,
    action_dim: int,
    dtype=np.float32,
) -> PolicyParams:
    """Xavier-uniform weights, zero biases, damped output heads.

    With zero biases and small heads an untrained forward pass gives
    mu ~ 0 and log sigma ~ 0, i.e. actions start standard normal.
    """
    shapes = param_shapes(resolution, num_materials, hidden_width, action_dim)
    tensors: dict[str, np.ndarray] = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        if "_b" in name:
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        limit = _xavier_limit(shape)
        w = rng.uniform(-limit, limit, size=shape)
        if name in ("pi_w3", "v_w3"):
            w = w * HEAD_SCALE
        tensors[name] = w.astype(dtype)
    return PolicyParams(resolution, num_materials, hidden_width, action_dim, tensors)


def zero_tape(params: PolicyParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# FFT convolution
# ---------------------------------------------------------------------------

def _conv3d_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation: x (B,C,D,D,D) with w (O,C,K,K,K)."""
    d = x.shape[-1]
    k = w.shape[-1]
    n = next_fast_len(d + k - 1, real=True)  # avoid slow prime-size FFTs
    lo = k - 1 - k // 2
    xf = rfftn(x, s=(n, n, n), axes=_FFT_AXES)
    wf = rfftn(w[:, :, ::-1, ::-1, ::-1], s=(n, n, n), axes=_FFT_AXES)
    yf = np.einsum("bcxyz,ocxyz->boxyz", xf, wf)
    y = irfftn(yf, s=(n, n, n), axes=_FFT_AXES)
    return np.ascontiguousarray(y[..., lo:lo + d, lo:lo + d, lo:lo + d])


def _conv3d_grad_input(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient through _conv3d_same w.r.t. x: correlate with the
    channel-swapped, spatially flipped kernel (same padding, odd K)."""
    wt = np.ascontiguousarray(np.swapaxes(w, 0, 1)[:, :, ::-1, ::-1, ::-1])
    return _conv3d_same(gy, wt)


def _conv3d_grad_weights(x: np.ndarray, gy: np.ndarray, k: int) -> np.ndarray:
    """Gradient w.r.t. w: correlate padded input with the output grad,
    contracted over the batch. Returns (O, C, k, k, k)."""
    d = x.shape[-1]
    p = k // 2
    pad = ((0, 0), (0, 0), (p, p), (p, p), (p, p))
    xp = np.pad(x, pad)
    n = next_fast_len((d + 2 * p) + d - 1, real=True)
    lo = d - 1
    xf = rfftn(xp, s=(n, n, n), axes=_FFT_AXES)
    gf = rfftn(gy[:, :, ::-1, ::-1, ::-1], s=(n, n, n), axes=_FFT_AXES)
    cf = np.einsum("bcxyz,boxyz->ocxyz", xf, gf)
    c = irfftn(cf, s=(n, n, n), axes=_FFT_AXES)
    return np.ascontiguousarray(c[..., lo:lo + k, lo:lo + k, lo:lo + k])


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class PolicyOutput:
    """Gaussian policy head and state value; batched or single."""

    mu: np.ndarray  # (A,) or (B, A)
    log_sigma: np.ndarray  # matches mu
    value: np.ndarray | float  # scalar or (B,)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


def forward_cache(
    params: PolicyParams, states: np.ndarray
) -> tuple[PolicyOutput, dict[str, np.ndarray]]:
    """Batched forward pass keeping every intermediate needed by backward.

    states: (B, rho, rho, rho, k) one-hot, any float dtype.
    """
    p = params.tensors
    dtype = params.dtype
    x = np.ascontiguousarray(np.moveaxis(states, -1, 1), dtype=dtype)
    batch = x.shape[0]
    a = params.action_dim

    z1 = _conv3d_same(x, p["conv1_w"]) + p["conv1_b"][None, :, None, None, None]
    a1 = np.maximum(z1, 0)
    z2 = _conv3d_same(a1, p["conv2_w"]) + p["conv2_b"][None, :, None, None, None]
    a2 = np.maximum(z2, 0)
    h = a2.reshape(batch, -1)

    p1 = np.tanh(h @ p["pi_w1"] + p["pi_b1"])
    p2 = np.tanh(p1 @ p["pi_w2"] + p["pi_b2"])
    head = p2 @ p["pi_w3"] + p["pi_b3"]
    mu = head[:, :a]
    raw_log_sigma = head[:, a:]
    log_sigma = np.clip(raw_log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)

    c1 = np.tanh(h @ p["v_w1"] + p["v_b1"])
    c2 = np.tanh(c1 @ p["v_w2"] + p["v_b2"])
    value = (c2 @ p["v_w3"] + p["v_b3"])[:, 0]

    cache = {
        "x": x, "a1": a1, "a2": a2, "h": h,
        "p1": p1, "p2": p2, "raw_log_sigma": raw_log_sigma,
        "c1": c1, "c2": c2,
    }
    return PolicyOutput(mu=mu, log_sigma=log_sigma, value=value), cache


def forward(params: PolicyParams, states: np.ndarray) -> PolicyOutput:
    """Forward pass; accepts a single state or a batch."""
    states = np.asarray(states)
    single = states.ndim == 4
    if single:
        states = states[None]
    out, _ = forward_cache(params, states)
    if single:
        return PolicyOutput(
            mu=out.mu[0], log_sigma=out.log_sigma[0], value=float(out.value[0])
        )
    return out


def backward(
    params: PolicyParams,
    cache: dict[str, np.ndarray],
    grad_mu: np.ndarray,
    grad_log_sigma: np.ndarray,
    grad_value: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact gradients of sum_b(grad.output) w.r.t. every parameter.

    The caller supplies the loss gradients at the three outputs; no
    averaging happens here, so accumulation is additive over batches.
    """
    p = params.tensors
    tape: dict[str, np.ndarray] = {}

    # clamp on log sigma passes gradient only strictly inside the bounds
    raw = cache["raw_log_sigma"]
    inside = (raw > LOG_SIGMA_MIN) & (raw < LOG_SIGMA_MAX)
    g_head = np.concatenate(
        [np.asarray(grad_mu, dtype=raw.dtype),
         np.asarray(grad_log_sigma, dtype=raw.dtype) * inside], axis=1
    )
    p2, p1, h = cache["p2"], cache["p1"], cache["h"]
    tape["pi_w3"] = p2.T @ g_head
    tape["pi_b3"] = g_head.sum(axis=0)
    g = (g_head @ p["pi_w3"].T) * (1.0 - p2 * p2)
    tape["pi_w2"] = p1.T @ g
    tape["pi_b2"] = g.sum(axis=0)
    g = (g @ p["pi_w2"].T) * (1.0 - p1 * p1)
    tape["pi_w1"] = h.T @ g
    tape["pi_b1"] = g.sum(axis=0)
    g_h = g @ p["pi_w1"].T

    c2, c1 = cache["c2"], cache["c1"]
    gv = np.asarray(grad_value, dtype=raw.dtype)[:, None]
    tape["v_w3"] = c2.T @ gv
    tape["v_b3"] = gv.sum(axis=0)
    g = (gv @ p["v_w3"].T) * (1.0 - c2 * c2)
    tape["v_w2"] = c1.T @ g
    tape["v_b2"] = g.sum(axis=0)
    g = (g @ p["v_w2"].T) * (1.0 - c1 * c1)
    tape["v_w1"] = h.T @ g
    tape["v_b1"] = g.sum(axis=0)
    g_h = g_h + g @ p["v_w1"].T

    a2, a1, x = cache["a2"], cache["a1"], cache["x"]
    g_a2 = g_h.reshape(a2.shape) * (a2 > 0)
    tape["conv2_w"] = _conv3d_grad_weights(a1, g_a2, CONV2_SIZE)
    tape["conv2_b"] = g_a2.sum(axis=(0, 2, 3, 4))
    g_a1 = _conv3d_grad_input(g_a2, p["conv2_w"]) * (a1 > 0)
    tape["conv1_w"] = _conv3d_grad_weights(x, g_a1, CONV1_SIZE)
    tape["conv1_b"] = g_a1.sum(axis=(0, 2, 3, 4))
    return {name: tape[name] for name in PARAM_NAMES}


# ---------------------------------------------------------------------------
# the Gaussian policy head
# ---------------------------------------------------------------------------

def sample(out: PolicyOutput, rng: np.random.Generator) -> np.ndarray:
    """Draw a ~ N(mu, diag(sigma^2)) using the supplied stream."""
    mu = np.asarray(out.mu)
    z = rng.standard_normal(mu.shape, dtype=mu.dtype)
    return mu + np.exp(out.log_sigma) * z


def log_prob(out: PolicyOutput, action: np.ndarray) -> np.ndarray | float:
    """Diagonal-Gaussian log density, accumulated in float64."""
    mu = np.asarray(out.mu, dtype=np.float64)
    log_sigma = np.asarray(out.log_sigma, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    z = (a - mu) / np.exp(log_sigma)
    terms = -0.5 * np.log(2.0 * np.pi) - log_sigma - 0.5 * z * z
    total = terms.sum(axis=-1)
    return float(total) if total.ndim == 0 else total


def entropy(out: PolicyOutput) -> np.ndarray | float:
    """Closed-form entropy of the diagonal Gaussian."""
    log_sigma = np.asarray(out.log_sigma, dtype=np.float64)
    per_dim = 0.5 * np.log(2.0 * np.pi * np.e) + log_sigma
    total = per_dim.sum(axis=-1)
    return float(total) if total.ndim == 0 else total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# "VXC1": text manifest
#     VXC1 <n_tensors>
#     <name> <dim,dim,...> <byte_offset>   (one line per tensor)
#     payload <n_bytes>
# then the concatenated row-major little-endian float32 payload, then the
# little-endian CRC32 of the payload. Network hyperparameters are implied
# by the tensor shapes, so loads reconstruct PolicyParams exactly.

VXC_MAGIC = "VXC1"


def save_vxc(path, params: PolicyParams) -> None:
    lines = [f"{VXC_MAGIC} {len(PARAM_NAMES)}"]
    payload = bytearray()
    for name in PARAM_NAMES:
        tensor = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        dims = ",".join(str(d) for d in tensor.shape)
        lines.append(f"{name} {dims} {len(payload)}")
        payload.extend(tensor.tobytes())
    lines.append(f"payload {len(payload)}")
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(bytes(payload))
        fh.write(crc.to_bytes(4, "little"))


def load_vxc(path) -> PolicyParams:
    with open(path, "rb") as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != VXC_MAGIC.encode("ascii"):
            raise ValueError(f"{path}: not a {VXC_MAGIC} file")
        n_tensors = int(header[1])
        entries = []
        for _ in range(n_tensors):
            name, dims, offset = fh.readline().split()
            shape = tuple(int(d) for d in dims.split(b","))
            entries.append((name.decode("ascii"), shape, int(offset)))
        tag, n_bytes = fh.readline().split()
        if tag != b"payload":
            raise ValueError(f"{path}: missing payload marker")
        payload = fh.read(int(n_bytes))
        crc_stored = int.from_bytes(fh.read(4), "little")
    if len(payload) != int(n_bytes):
        raise ValueError(f"{path}: truncated payload")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ValueError(f"{path}: checksum mismatch")
    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing:
        raise ValueError(f"{path}: missing tensors {missing}")
    features, hidden_width = tensors["pi_w1"].shape
    resolution = round(features ** (1.0 / 3.0))
    if resolution**3 != features:
        raise ValueError(f"{path}: first dense layer width {features} is not a cube")
    return PolicyParams(
        resolution=resolution,
        num_materials=tensors["conv1_w"].shape[1],
        hidden_width=hidden_width,
        action_dim=tensors["pi_b3"].shape[0] // 2,
        tensors={n: tensors[n] for n in PARAM_NAMES},
    )
