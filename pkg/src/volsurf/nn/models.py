"""MLP, CNN and encoder-decoder Transformer surface reconstructors.

All models map a ``(B, 2, 8, 25)`` input (masked iv, mask) to a
``(B, 1, 8, 25)`` prediction. Parameters live in an ordered dict of leaf
tensors so they can be flattened for checkpoints and optimizers.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import AllMaskedError, ShapeError
from ..surface import SurfaceGrid, make_grid
from . import autodiff as ad

KINDS = ("mlp", "cnn", "transformer")
POS_ENCODINGS = ("fourier", "learnable")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "transformer"
    mlp_hidden: tuple = (256, 256, 256)
    cnn_channels: int = 104
    cnn_layers: int = 5
    d_model: int = 64
    enc_layers: int = 3
    dec_layers: int = 2
    heads: int = 4
    d_ff: int = 256
    fourier_bands: int = 8
    positional_encoding: str = "fourier"

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        if self.positional_encoding not in POS_ENCODINGS:
            raise ValueError(f"positional_encoding must be one of {POS_ENCODINGS}")
        dims = (*self.mlp_hidden, self.cnn_channels, self.d_model, self.heads, self.d_ff, self.fourier_bands)
        if min(dims) < 1 or self.cnn_layers < 2 or self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def fourier_features(x: np.ndarray, L: int) -> np.ndarray:
    """[x, sin(pi x), cos(pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)] per entry."""
    if L < 1:
        raise ValueError("need at least one frequency band")
    x = np.asarray(x, dtype=np.float64)[..., None]
    freqs = math.pi * 2.0 ** np.arange(L)
    ang = x * freqs
    feats = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*x.shape[:-1], 2 * L)
    return np.concatenate([x, feats], axis=-1)


def fourier_encode(g: SurfaceGrid, L: int = 8) -> np.ndarray:
    """Coordinate encoding of every grid token, row-major over (tenor, strike)."""
    gt = fourier_features(g.tenors, L)
    gm = fourier_features(g.log_moneyness, L)
    nt, nk = g.shape
    return np.concatenate(
        [np.repeat(gt, nk, axis=0), np.tile(gm, (nt, 1))],
        axis=1,
    )


class _Init:
    """Fan-in uniform initializer drawing from one seeded generator."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def weight(self, shape, fan_in: int) -> ad.Tensor:
        bound = math.sqrt(1.0 / fan_in)
        return ad.parameter(self.rng.uniform(-bound, bound, size=shape))

    @staticmethod
    def zeros(shape) -> ad.Tensor:
        return ad.parameter(np.zeros(shape))

    @staticmethod
    def ones(shape) -> ad.Tensor:
        return ad.parameter(np.ones(shape))


class Model:
    """Base class: holds ``cfg``, ``grid`` and the ordered parameter dict."""

    def __init__(self, cfg: ModelConfig, grid: SurfaceGrid | None = None, seed: int = 0):
        self.cfg = cfg
        self.grid = grid or make_grid()
        self.params: dict[str, ad.Tensor] = {}
        self._build(_Init(seed))

    def _build(self, init: _Init):
        raise NotImplementedError

    def forward(self, x) -> ad.Tensor:
        raise NotImplementedError

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (2, *self.grid.shape):
            raise ShapeError(f"expected input of shape (B, 2, {self.grid.shape[0]}, {self.grid.shape[1]}), got {x.shape}")
        return x

    def predict(self, x) -> np.ndarray:
        """Plain-array prediction of shape ``(B, 8, 25)``."""
        with ad.no_grad():
            return self.forward(x).data[:, 0]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count():
            raise ShapeError(f"flat vector has {flat.size} values, model needs {self.param_count()}")
        off = 0
        for p in self.params.values():
            p.data = flat[off : off + p.size].reshape(p.shape).copy()
            off += p.size

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = state[k].copy()


class MLP(Model):
    def _build(self, init):
        sizes = [2 * self.grid.size, *self.cfg.mlp_hidden, self.grid.size]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"fc{i}.w"] = init.weight((a, b), a)
            self.params[f"fc{i}.b"] = init.zeros(b)
        self._n = len(sizes) - 1

    def forward(self, x):
        x = self._check_input(x)
        h = ad.Tensor(x.reshape(x.shape[0], -1))
        for i in range(self._n):
            h = ad.linear(h, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"])
            if i < self._n - 1:
                h = ad.relu(h)
        return h.reshape(x.shape[0], 1, *self.grid.shape)


class CNN(Model):
    def _build(self, init):
        c = self.cfg.cnn_channels
        chans = [2] + [c] * (self.cfg.cnn_layers - 1) + [1]
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            self.params[f"conv{i}.w"] = init.weight((b, a, 3, 3), 9 * a)
            self.params[f"conv{i}.b"] = init.zeros(b)
        self._n = len(chans) - 1

    def forward(self, x):
        h = ad.Tensor(self._check_input(x))
        for i in range(self._n):
            h = ad.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            if i < self._n - 1:
                h = ad.relu(h)
        return h


class Transformer(Model):
    """Encoder over observed tokens, decoder queries at every grid token."""

    def _build(self, init):
        cfg = self.cfg
        d, f = cfg.d_model, cfg.d_ff
        self.coords = fourier_encode(self.grid, cfg.fourier_bands)
        d_in = 1 + self.coords.shape[1]
        if cfg.positional_encoding == "learnable":
            self.params["pos"] = ad.parameter(self.coords.copy())
        p = self.params
        for side in ("enc_in", "dec_in"):
            p[f"{side}.w"] = init.weight((d_in, d), d_in)
            p[f"{side}.b"] = init.zeros(d)

        def attn(prefix):
            for n in ("q", "k", "v", "o"):
                p[f"{prefix}.w{n}"] = init.weight((d, d), d)
                p[f"{prefix}.b{n}"] = init.zeros(d)

        def norm(prefix):
            p[f"{prefix}.g"] = init.ones(d)
            p[f"{prefix}.b"] = init.zeros(d)

        def ffn(prefix):
            p[f"{prefix}.w1"] = init.weight((d, f), d)
            p[f"{prefix}.b1"] = init.zeros(f)
            p[f"{prefix}.w2"] = init.weight((f, d), f)
            p[f"{prefix}.b2"] = init.zeros(d)

        for i in range(cfg.enc_layers):
            norm(f"enc{i}.ln1")
            attn(f"enc{i}.attn")
            norm(f"enc{i}.ln2")
            ffn(f"enc{i}.ff")
        for i in range(cfg.dec_layers):
            norm(f"dec{i}.ln1")
            attn(f"dec{i}.self")
            norm(f"dec{i}.ln2")
            attn(f"dec{i}.cross")
            norm(f"dec{i}.ln3")
            ffn(f"dec{i}.ff")
        p["head.w"] = init.weight((d, 1), d)
        p["head.b"] = init.zeros(1)

    # -- blocks ------------------------------------------------------------
    def _ln(self, x, prefix):
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _mha(self, xq, xkv, prefix, key_mask, record=None):
        p = self.params
        B, Lq, d = xq.shape
        Lk = xkv.shape[1]
        h = self.cfg.heads
        dk = d // h

        def split(t, L):
            return t.reshape(B, L, h, dk).transpose(0, 2, 1, 3)

        q = split(ad.linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), Lq)
        k = split(ad.linear(xkv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), Lk)
        v = split(ad.linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), Lk)
        out, weights = ad.scaled_dot_product_attention(q, k, v, key_mask)
        if record is not None:
            record.append(weights)
        out = out.transpose(0, 2, 1, 3).reshape(B, Lq, d)
        return ad.linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _ffn(self, x, prefix):
        p = self.params
        h = ad.gelu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return ad.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _embed(self, values: np.ndarray, side: str) -> ad.Tensor:
        # [value || coords] @ W splits into value * W[0] + coords @ W[1:]
        w, b = self.params[f"{side}.w"], self.params[f"{side}.b"]
        pos = self.params["pos"] if "pos" in self.params else ad.Tensor(self.coords)
        val = ad.linear(ad.Tensor(values[..., None]), w[:1])
        return val + ad.linear(pos, w[1:]) + b

    def forward(self, x, record_attention: list | None = None):
        x = self._check_input(x)
        B = x.shape[0]
        n = self.grid.size
        mask = x[:, 1].reshape(B, n) > 0.5
        empty = ~mask.any(axis=1)
        if empty.any():
            raise AllMaskedError(f"samples {np.flatnonzero(empty).tolist()} have no observed tokens")
        values = np.where(mask, x[:, 0].reshape(B, n), 0.0)

        h = self._embed(values, "enc_in")
        for i in range(self.cfg.enc_layers):
            h = h + self._mha(self._ln(h, f"enc{i}.ln1"), self._ln(h, f"enc{i}.ln1"), f"enc{i}.attn", mask)
            h = h + self._ffn(self._ln(h, f"enc{i}.ln2"), f"enc{i}.ff")
        memory = h

        z = self._embed(values, "dec_in")
        for i in range(self.cfg.dec_layers):
            zn = self._ln(z, f"dec{i}.ln1")
            z = z + self._mha(zn, zn, f"dec{i}.self", None)
            z = z + self._mha(self._ln(z, f"dec{i}.ln2"), memory, f"dec{i}.cross", mask, record_attention)
            z = z + self._ffn(self._ln(z, f"dec{i}.ln3"), f"dec{i}.ff")
        out = ad.linear(z, self.params["head.w"], self.params["head.b"])
        return out.reshape(B, 1, *self.grid.shape)

    def attention(self, x) -> list[np.ndarray]:
        """Decoder cross-attention weights, one ``(B, heads, 200, 200)`` array per layer."""
        rec: list[np.ndarray] = []
        with ad.no_grad():
            self.forward(x, rec)
        return rec


_CLASSES = {"mlp": MLP, "cnn": CNN, "transformer": Transformer}


def build_model(cfg: ModelConfig, grid: SurfaceGrid | None = None, seed: int = 0) -> Model:
    return _CLASSES[cfg.kind](cfg, grid, seed)
