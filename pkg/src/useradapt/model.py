"""Two-stage linear model: a feature stage F followed by verb and noun heads H."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PARAM_NAMES = ("F_weight", "F_bias", "Wv", "bv", "Wn", "bn")
SCOPES = {
    "F": ("F_weight", "F_bias"),
    "H": ("Wv", "bv", "Wn", "bn"),
    "FH": PARAM_NAMES,
}
ACTIVATIONS = ("linear", "relu")


def scope_names(scope: str) -> tuple[str, ...]:
    try:
        return SCOPES[scope]
    except KeyError:
        raise ValueError(f"unknown scope {scope!r}; expected one of {sorted(SCOPES)}") from None


@dataclass
class ModelParams:
    F_weight: np.ndarray  # (d, h)
    F_bias: np.ndarray    # (h,)
    Wv: np.ndarray        # (h, V)
    bv: np.ndarray        # (V,)
    Wn: np.ndarray        # (h, N)
    bn: np.ndarray        # (N,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        d, h = self.F_weight.shape
        if (self.F_bias.shape != (h,) or self.Wv.shape[0] != h or self.Wn.shape[0] != h
                or self.bv.shape != self.Wv.shape[1:] or self.bn.shape != self.Wn.shape[1:]):
            raise ValueError("inconsistent parameter shapes")

    @classmethod
    def zeros(cls, d: int, h: int, num_verbs: int, num_nouns: int, activation="linear") -> "ModelParams":
        return cls(np.zeros((d, h)), np.zeros(h), np.zeros((h, num_verbs)), np.zeros(num_verbs),
                   np.zeros((h, num_nouns)), np.zeros(num_nouns), activation)

    @classmethod
    def init(cls, d: int, h: int, num_verbs: int, num_nouns: int, rng: np.random.Generator,
             activation="linear") -> "ModelParams":
        """Gaussian feature stage scaled by 1/sqrt(d), zero heads."""
        p = cls.zeros(d, h, num_verbs, num_nouns, activation)
        p.F_weight = rng.standard_normal((d, h)) / np.sqrt(d)
        return p

    @property
    def dims(self) -> tuple[int, int, int, int]:
        d, h = self.F_weight.shape
        return d, h, self.Wv.shape[1], self.Wn.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(*(getattr(self, n).copy() for n in PARAM_NAMES), activation=self.activation)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(getattr(self, n)) for n in PARAM_NAMES), activation=self.activation)

    def flat(self, names=PARAM_NAMES) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in names])

    def digest(self) -> str:
        h = hashlib.sha256()
        for n in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, n), dtype="<f8").tobytes())
        h.update(self.activation.encode())
        return h.hexdigest()

    def equals(self, other: "ModelParams") -> bool:
        return self.activation == other.activation and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)


def _as_matrix(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = params.F_weight.shape[0]
    if x.shape[-1] != d:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match model input {d}")
    return x


def features(params: ModelParams, x) -> np.ndarray:
    x = _as_matrix(params, x)
    z = x @ params.F_weight + params.F_bias
    if params.activation == "relu":
        z = np.maximum(z, 0.0)
    return z


def forward(params: ModelParams, x):
    """Verb and noun logits for one feature vector or a (n, d) matrix."""
    z = features(params, x)
    return z @ params.Wv + params.bv, z @ params.Wn + params.bn


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def per_sample_losses(params: ModelParams, x, verbs, nouns):
    """Per-sample verb and noun cross-entropies plus argmax predictions."""
    lv, ln = forward(params, x)
    idx = np.arange(lv.shape[0])
    ce_v = -log_softmax(lv)[idx, verbs]
    ce_n = -log_softmax(ln)[idx, nouns]
    return ce_v, ce_n, lv.argmax(axis=1), ln.argmax(axis=1)


def loss(params: ModelParams, x, verbs, nouns) -> float:
    """Mean over samples of verb cross-entropy plus noun cross-entropy."""
    x = np.atleast_2d(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    ce_v, ce_n, _, _ = per_sample_losses(params, x, verbs, nouns)
    return float(np.mean(ce_v + ce_n))


def _softmax_minus_onehot(logits, labels):
    p = np.exp(log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1.0
    return p


def grad(params: ModelParams, x, verbs, nouns, scope: str = "FH") -> ModelParams:
    """Analytic gradient of :func:`loss`; entries outside ``scope`` are zero."""
    names = scope_names(scope)
    x = _as_matrix(params, np.atleast_2d(x))
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    pre = x @ params.F_weight + params.F_bias
    z = np.maximum(pre, 0.0) if params.activation == "relu" else pre
    dv = _softmax_minus_onehot(z @ params.Wv + params.bv, verbs) / n
    dn = _softmax_minus_onehot(z @ params.Wn + params.bn, nouns) / n
    g = params.zeros_like()
    if "Wv" in names:
        g.Wv = z.T @ dv
        g.bv = dv.sum(axis=0)
        g.Wn = z.T @ dn
        g.bn = dn.sum(axis=0)
    if "F_weight" in names:
        dz = dv @ params.Wv.T + dn @ params.Wn.T
        if params.activation == "relu":
            dz = dz * (pre > 0)
        g.F_weight = x.T @ dz
        g.F_bias = dz.sum(axis=0)
    return g


def add_params(a: ModelParams, b: ModelParams) -> ModelParams:
    return ModelParams(*(getattr(a, n) + getattr(b, n) for n in PARAM_NAMES), activation=a.activation)


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float64 blob) and ``<path>.json`` (manifest)."""
    path = Path(path)
    blob, manifest = path.with_suffix(".bin"), path.with_suffix(".json")
    entries, offset = [], 0
    with blob.open("wb") as fh:
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest.write_text(json.dumps({"format": "useradapt-checkpoint", "version": 1, "dtype": "<f8",
                                    "activation": params.activation, "tensors": entries}, indent=2))
    return blob, manifest


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.fromfile(path.with_suffix(".bin"), dtype=meta.get("dtype", "<f8"))
    arrays = {}
    for e in meta["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = data[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return ModelParams(**arrays, activation=meta.get("activation", "linear"))
