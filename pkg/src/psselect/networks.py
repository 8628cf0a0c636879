"""CNN-ISS and CLSTM-ISS segmenters, patch-wise prediction and PSNET1 checkpoints.

CNN-ISS treats time as a third convolution axis: input ``(N, H, W, T, 1)``,
four [3-D conv -> BN -> ReLU] blocks, dropout, then a dense map from each
pixel's ``T * C`` features to one logit. Its head therefore fixes ``T``.

CLSTM-ISS runs three [ConvLSTM over T -> BN -> ReLU] blocks on
``(N, T, H, W, 1)``, takes the last time step, applies a 2-D conv + ReLU,
dropout and a per-pixel dense layer. No parameter depends on ``T``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from psselect.autodiff import (
    BatchNormState, ConvLstmParams, Tensor, batchnorm, conv, convlstm_sequence,
    dropout, no_grad, pixel_dense, relu, sigmoid, stack,
)
from psselect.stack import FormatError, InterferogramStack, PixelMask, chunk, stitch

CHECKPOINT_MAGIC = b"PSNET1"
KINDS = ("cnn_iss", "clstm_iss")
DEFAULT_FILTERS = {"cnn_iss": (16, 16, 32, 64), "clstm_iss": (16, 16, 32, 64)}
MASK_THRESHOLD = 0.5
PREDICT_BATCH = 4


@dataclass
class NetworkSpec:
    """Architecture hyper-parameters.

    For ``clstm_iss`` the last entry of ``filter_plan`` is the 2-D conv head
    and the others are ConvLSTM layers. ``n_timesteps`` is binding for
    ``cnn_iss`` only.
    """

    kind: str = "clstm_iss"
    filter_plan: tuple = ()
    kernel: int = 3
    dropout_rate: float = 0.25
    input_patch: int = 100
    n_timesteps: int = 10
    input_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not self.filter_plan:
            self.filter_plan = DEFAULT_FILTERS[self.kind]
        self.filter_plan = tuple(int(c) for c in self.filter_plan)
        if any(c < 1 for c in self.filter_plan):
            raise ValueError("filter counts must be positive")
        if self.kind == "clstm_iss" and len(self.filter_plan) < 2:
            raise ValueError("clstm_iss needs at least one ConvLSTM layer and a conv head")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.input_patch < 1:
            raise ValueError("input_patch must be positive")
        if self.n_timesteps < 2:
            raise ValueError("n_timesteps must be >= 2")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["filter_plan"] = list(self.filter_plan)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetworkSpec fields: {sorted(unknown)}")
        return cls(**d)


def _uniform(rng, shape, fan_in):
    lim = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)


def _zeros(shape, value=0.0):
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)


class Network:
    """Common parameter handling; subclasses define ``forward``."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self) -> list:
        return list(self.params.items())

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _add(self, name: str, t: Tensor) -> Tensor:
        t.name = name
        self.params[name] = t
        return t

    def _add_bn(self, prefix: str, channels: int):
        self._add(f"{prefix}.scale", _zeros(channels, 1.0))
        self._add(f"{prefix}.shift", _zeros(channels))
        self.bn[prefix] = BatchNormState(channels)

    def _bn(self, prefix: str, x: Tensor, mode: str) -> Tensor:
        return batchnorm(x, self.params[f"{prefix}.scale"], self.params[f"{prefix}.shift"],
                         self.bn[prefix], mode=mode)

    def state_dict(self) -> dict:
        out = {name: p.data.copy() for name, p in self.params.items()}
        for prefix, st in self.bn.items():
            out[f"{prefix}.running_mean"] = st.mean.copy()
            out[f"{prefix}.running_var"] = st.var.copy()
        return out

    def load_state_dict(self, state: dict):
        for name, p in self.params.items():
            if name not in state:
                raise ValueError(f"missing tensor {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"tensor {name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()
        for prefix, st in self.bn.items():
            st.mean = np.asarray(state[f"{prefix}.running_mean"], dtype=np.float64).copy()
            st.var = np.asarray(state[f"{prefix}.running_var"], dtype=np.float64).copy()

    def zero_(self):
        """Set every parameter to zero (running statistics untouched)."""
        for p in self.params.values():
            p.data = np.zeros_like(p.data)

    def encode(self, phase: np.ndarray) -> np.ndarray:
        """(N, T, H, W) wrapped phase -> this network's 5-D input layout."""
        raise NotImplementedError

    def forward(self, x, mode: str = "infer", rng=None, return_features: bool = False):
        raise NotImplementedError

    def predict_proba(self, phase: np.ndarray) -> np.ndarray:
        """Inference on (N, T, H, W) phase; returns (N, H, W) probabilities."""
        with no_grad():
            return self.forward(self.encode(phase), mode="infer").data


class CnnIss(Network):
    def __init__(self, spec: NetworkSpec, seed=0):
        super().__init__(spec)
        rng = np.random.default_rng(seed)
        k = spec.kernel
        cin = 1
        for li, c in enumerate(spec.filter_plan, start=1):
            self._add(f"conv{li}.w", _uniform(rng, (k, k, k, cin, c), k ** 3 * cin))
            self._add(f"conv{li}.b", _zeros(c))
            self._add_bn(f"bn{li}", c)
            cin = c
        nf = spec.n_timesteps * cin
        self._add("dense.w", _uniform(rng, (nf,), nf))
        self._add("dense.b", _zeros(1))

    @staticmethod
    def expected_parameters(spec: NetworkSpec) -> int:
        k3 = spec.kernel ** 3
        total, cin = 0, 1
        for c in spec.filter_plan:
            total += k3 * cin * c + c + 2 * c
            cin = c
        return total + spec.n_timesteps * cin + 1

    def encode(self, phase):
        phase = np.asarray(phase, dtype=np.float64)
        return np.transpose(phase, (0, 2, 3, 1))[..., None] * self.spec.input_scale

    def forward(self, x, mode="infer", rng=None, return_features=False):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 5 or x.shape[-1] != 1:
            raise ValueError(f"cnn_iss expects (N, H, W, T, 1), got {x.shape}")
        if x.shape[3] != self.spec.n_timesteps:
            raise ValueError(
                f"cnn_iss was built for T={self.spec.n_timesteps}, got T={x.shape[3]}"
            )
        h = x
        for li in range(1, len(self.spec.filter_plan) + 1):
            h = conv(h, self.params[f"conv{li}.w"], self.params[f"conv{li}.b"])
            h = relu(self._bn(f"bn{li}", h, mode))
        feats = h
        h = dropout(h, self.spec.dropout_rate, mode, rng)
        logit = pixel_dense(h, self.params["dense.w"], self.params["dense.b"])
        n, hh, ww = x.shape[:3]
        prob = sigmoid(logit).reshape(n, hh, ww)
        return (prob, feats) if return_features else prob


class ClstmIss(Network):
    def __init__(self, spec: NetworkSpec, seed=0):
        super().__init__(spec)
        rng = np.random.default_rng(seed)
        k = spec.kernel
        *lstm_plan, head = spec.filter_plan
        self.cells: list[ConvLstmParams] = []
        cin = 1
        for li, c in enumerate(lstm_plan, start=1):
            cell = ConvLstmParams.init(cin, c, k, rng)
            for name, t in cell.tensors().items():
                self._add(f"lstm{li}.{name}", t)
            self.cells.append(cell)
            self._add_bn(f"bn{li}", c)
            cin = c
        self._add("head.w", _uniform(rng, (k, k, cin, head), k * k * cin))
        self._add("head.b", _zeros(head))
        self._add("dense.w", _uniform(rng, (head,), head))
        self._add("dense.b", _zeros(1))

    @staticmethod
    def expected_parameters(spec: NetworkSpec) -> int:
        k2 = spec.kernel ** 2
        *lstm_plan, head = spec.filter_plan
        total, cin = 0, 1
        for c in lstm_plan:
            total += k2 * cin * 4 * c + k2 * c * 4 * c + k2 * c * 2 * c + k2 * c * c + 4 * c
            total += 2 * c
            cin = c
        return total + k2 * cin * head + head + head + 1

    def encode(self, phase):
        phase = np.asarray(phase, dtype=np.float64)
        return phase[..., None] * self.spec.input_scale

    def forward(self, x, mode="infer", rng=None, return_features=False):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 5 or x.shape[-1] != 1:
            raise ValueError(f"clstm_iss expects (N, T, H, W, 1), got {x.shape}")
        if x.shape[1] < 2:
            raise ValueError("clstm_iss needs at least 2 time steps")
        seq = x
        for li, cell in enumerate(self.cells, start=1):
            hidden = convlstm_sequence(seq, cell)
            seq = relu(self._bn(f"bn{li}", stack(hidden, axis=1), mode))
        last = seq[:, -1]
        feats = relu(conv(last, self.params["head.w"], self.params["head.b"]))
        h = dropout(feats, self.spec.dropout_rate, mode, rng)
        logit = pixel_dense(h, self.params["dense.w"], self.params["dense.b"])
        n, hh, ww = last.shape[:3]
        prob = sigmoid(logit).reshape(n, hh, ww)
        return (prob, feats) if return_features else prob


def build_cnn_iss(spec: NetworkSpec, seed=0) -> CnnIss:
    if spec.kind != "cnn_iss":
        raise ValueError("spec.kind must be 'cnn_iss'")
    return CnnIss(spec, seed)


def build_clstm_iss(spec: NetworkSpec, seed=0) -> ClstmIss:
    if spec.kind != "clstm_iss":
        raise ValueError("spec.kind must be 'clstm_iss'")
    return ClstmIss(spec, seed)


def build_network(spec: NetworkSpec, seed=0) -> Network:
    return build_cnn_iss(spec, seed) if spec.kind == "cnn_iss" else build_clstm_iss(spec, seed)


def predict_full(network: Network, stack_: InterferogramStack, patch_size: int | None = None,
                 batch: int = PREDICT_BATCH) -> tuple[np.ndarray, PixelMask]:
    """Chunk, run inference per patch and stitch; mask is ``prob >= 0.5``."""
    patch_size = patch_size or network.spec.input_patch
    if network.spec.kind == "cnn_iss" and stack_.n_ifgs != network.spec.n_timesteps:
        raise ValueError(
            f"cnn_iss was trained on T={network.spec.n_timesteps}; stack has {stack_.n_ifgs} ifgs"
        )
    ps = chunk(stack_, patch_size)
    preds = []
    for start in range(0, len(ps.patches), batch):
        group = ps.patches[start:start + batch]
        phase = np.stack([p.stack.phase.astype(np.float64) for p in group])
        preds.extend(network.predict_proba(phase))
    prob = stitch(preds, ps)
    return prob, PixelMask(prob >= MASK_THRESHOLD, network.spec.kind)


# ----------------------------------------------------------------------------
# PSNET1 checkpoints

def save_checkpoint(network: Network, path, hyperparameters: dict | None = None, seed=None) -> None:
    state = network.state_dict()
    names = list(state)
    manifest = {
        "spec": network.spec.to_dict(),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "hyperparameters": hyperparameters or {},
        "seed": seed,
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
    for n in names:
        buf.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Network, dict]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise FormatError("bad magic: expected PSNET1")
    start = len(CHECKPOINT_MAGIC) + 1
    end = buf.find(b"\n", start)
    if end < 0:
        raise FormatError("unterminated manifest")
    try:
        manifest = json.loads(buf[start:end].decode("utf-8"))
        spec = NetworkSpec.from_dict(manifest["spec"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid manifest: {exc}") from None
    off = end + 1
    state = {}
    for e in entries:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(buf):
            raise FormatError("truncated checkpoint payload")
        state[e["name"]] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint payload")
    net = build_network(spec)
    try:
        net.load_state_dict(state)
    except (ValueError, KeyError) as exc:
        raise FormatError(str(exc)) from None
    return net, manifest
