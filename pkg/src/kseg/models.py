"""The four non-convolutional architectures and the Fourier positional encoding.

Every model maps a batch of volumes laid out as (B, D, in_features) — one
token per sagittal slice — to (B, D, out_features). The same slice-as-token
convention is used across architectures so domain comparisons stay fair.

Parameter counts (closed forms, Fi = in_features + 2K when positional
encoding with K bands is enabled, Fo = out_features, M = latent width,
D = tokens, L = latent array length, N = depth):

  MLP:          (Fi*M + M) + N*(M*M + M) + (M*Fo + Fo)
  ResMLP:       N*[4*Fi + (D*D + D) + (Fi*M + M) + (M*Fi + Fi)] + (Fi*Fo + Fo)
  Transformer:  (Fi*M + M) + N*[(4*M*M + M) + (M*4M + 4M) + (4M*M + M) + 4M]
                + (M*Fo + Fo)
  PerceiverIO:  (Fi*M + M) + L*M + D*M
                + [(4*M*M + M) + 4M]                      (encode cross-attn)
                + N*[(4*M*M + M) + (M*4M + 4M) + (4M*M + M) + 4M]
                + [(4*M*M + M) + 4M]                      (decode cross-attn)
                + (M*Fo + Fo)

(Each attention is 4 square linears of which only the output projection
carries a bias, hence 4*M*M + M; each pre-norm sublayer adds a 2M-param
layer normalization; ResMLP affines are 2*Fi each, two per block.)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

ARCH_MLP = "MLP"
ARCH_RESMLP = "ResMLP"
ARCH_TRANSFORMER = "TransformerEncoder"
ARCH_PERCEIVER = "PerceiverIO"
ARCHITECTURES = (ARCH_MLP, ARCH_RESMLP, ARCH_TRANSFORMER, ARCH_PERCEIVER)

_ATTENTION_ARCHS = (ARCH_TRANSFORMER, ARCH_PERCEIVER)
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; one axis of the experiment grid.

    ``tokens`` is the sagittal slice count D, ``depth`` the hidden-layer or
    block count N, ``latent`` the latent width M, ``latent_len`` the
    PerceiverIO latent array length L, and ``pe_bands`` the Fourier
    positional-encoding band count K (0 disables the encoding).
    """

    arch: str
    tokens: int
    in_features: int
    out_features: int
    depth: int
    latent: int
    heads: int = 2
    latent_len: int = 8
    pe_bands: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        for field in ("tokens", "in_features", "out_features", "latent"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.pe_bands < 0:
            raise ConfigError("pe_bands must be >= 0")
        if self.arch in _ATTENTION_ARCHS:
            if self.heads < 1 or self.latent % self.heads:
                raise ConfigError(
                    f"latent width {self.latent} must be divisible by "
                    f"heads {self.heads}"
                )
            if self.arch == ARCH_PERCEIVER and self.latent_len < 1:
                raise ConfigError("latent_len must be positive")

    @property
    def effective_in(self) -> int:
        """Per-token feature count after positional-encoding concatenation."""
        return self.in_features + 2 * self.pe_bands


def fourier_pe(tokens: int, bands: int) -> np.ndarray:
    """Sin/cos features of the token index at `bands` linearly spaced bands.

    Row d is [sin(pi*f_k*d/(D-1)) for all k] ++ [cos(...) for all k] with
    f_k linearly spaced in [1, D/2]. Row 0 is all zeros then all ones;
    the first cos band is injective over d, so rows are pairwise distinct.
    """
    if tokens < 1 or bands < 1:
        raise ConfigError("fourier_pe requires tokens >= 1 and bands >= 1")
    denom = max(tokens - 1, 1)
    freqs = np.linspace(1.0, tokens / 2.0, bands)
    phase = np.pi * np.arange(tokens)[:, None] * freqs[None, :] / denom
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


class _Params:
    """Ordered name -> Tensor registry shared by a model's layers."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def new(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._store:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._store[name] = t
        return t

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._store)


class Linear:
    """y = x @ W (+ b) with uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) init."""

    def __init__(self, params: _Params, name: str, fan_in: int, fan_out: int, rng,
                 bias: bool = True):
        bound = np.sqrt(1.0 / fan_in)
        self.w = params.new(f"{name}.w", rng.uniform(-bound, bound, (fan_in, fan_out)))
        self.b = (
            params.new(f"{name}.b", rng.uniform(-bound, bound, (fan_out,)))
            if bias
            else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y if self.b is None else y + self.b


class Affine:
    """Learnable per-feature scale and shift; no batch statistics."""

    def __init__(self, params: _Params, name: str, dim: int):
        self.scale = params.new(f"{name}.scale", np.ones(dim))
        self.shift = params.new(f"{name}.shift", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return (x * self.scale) + self.shift


class LayerNorm:
    """Normalization over the last axis with learnable affine."""

    def __init__(self, params: _Params, name: str, dim: int):
        self.gamma = params.new(f"{name}.gamma", np.ones(dim))
        self.beta = params.new(f"{name}.beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered * ad.powf(var + _LN_EPS, -0.5)
        return (normed * self.gamma) + self.beta


class MultiHeadAttention:
    """Standard scaled dot-product attention with separate q/k/v/out linears.

    The query and key/value inputs may carry different batch extents as long
    as they broadcast (used for the shared PerceiverIO latent array). The
    q/k/v projections are bias-free: a key bias is invisible to the softmax,
    so its gradient would be structurally zero.
    """

    def __init__(self, params: _Params, name: str, dim: int, heads: int, rng):
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(params, f"{name}.q", dim, dim, rng, bias=False)
        self.k = Linear(params, f"{name}.k", dim, dim, rng, bias=False)
        self.v = Linear(params, f"{name}.v", dim, dim, rng, bias=False)
        self.out = Linear(params, f"{name}.out", dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return ad.transpose(x.reshape(b, t, self.heads, self.head_dim), (0, 2, 1, 3))

    def weights(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        """Attention matrix (B, heads, Tq, Tk); rows sum to one."""
        q = ad.scale(self._split(self.q(q_in)), self.head_dim ** -0.5)
        k = self._split(self.k(kv_in))
        return ad.softmax(q @ ad.transpose(k, (0, 1, 3, 2)), axis=-1)

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        attn = self.weights(q_in, kv_in)
        v = self._split(self.v(kv_in))
        mixed = ad.transpose(attn @ v, (0, 2, 1, 3))
        b, t = mixed.shape[0], mixed.shape[1]
        return self.out(mixed.reshape(b, t, self.heads * self.head_dim))


class _FeedForward:
    """Pre-norm M -> 4M -> M block with GELU."""

    def __init__(self, params: _Params, name: str, dim: int, rng):
        self.up = Linear(params, f"{name}.up", dim, 4 * dim, rng)
        self.down = Linear(params, f"{name}.down", 4 * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


class _EncoderBlock:
    def __init__(self, params: _Params, name: str, dim: int, heads: int, rng):
        self.ln1 = LayerNorm(params, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(params, f"{name}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(params, f"{name}.ln2", dim)
        self.ff = _FeedForward(params, f"{name}.ff", dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        normed = self.ln1(x)
        x = x + self.attn(normed, normed)
        return x + self.ff(self.ln2(x))


class Model:
    """Base: holds the spec, the parameter registry, and the PE table."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self._params = _Params()
        self._pe = fourier_pe(spec.tokens, spec.pe_bands) if spec.pe_bands else None

    @property
    def params(self) -> dict[str, Tensor]:
        return self._params.as_dict()

    def parameter_count(self) -> int:
        return sum(t.size for t in self._params.as_dict().values())

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        params = self._params.as_dict()
        missing = sorted(set(params) - set(values))
        if missing:
            raise DimensionError(f"checkpoint is missing parameters: {missing}")
        for name, tensor in params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise DimensionError(
                    f"parameter {name!r} shape {arr.shape} != {tensor.data.shape}"
                )
            tensor.data = np.ascontiguousarray(arr)

    def _prepare(self, x: Tensor) -> Tensor:
        spec = self.spec
        if x.ndim != 3 or x.shape[1] != spec.tokens or x.shape[2] != spec.in_features:
            raise DimensionError(
                f"expected input (B, {spec.tokens}, {spec.in_features}), "
                f"got {x.shape}"
            )
        if self._pe is None:
            return x
        pe = np.broadcast_to(self._pe[None], (x.shape[0],) + self._pe.shape)
        return ad.concat([x, Tensor(np.ascontiguousarray(pe))], axis=2)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class MLPModel(Model):
    """Per-slice fully connected network; weights shared across slices."""

    def __init__(self, spec: ModelSpec, rng):
        super().__init__(spec)
        self.embed = Linear(self._params, "embed", spec.effective_in, spec.latent, rng)
        self.hidden = [
            Linear(self._params, f"hidden{i}", spec.latent, spec.latent, rng)
            for i in range(spec.depth)
        ]
        self.head = Linear(self._params, "head", spec.latent, spec.out_features, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.embed(self._prepare(x))
        for layer in self.hidden:
            h = ad.tanh(layer(h))
        return self.head(h)


class _ResMLPBlock:
    def __init__(self, params: _Params, name: str, tokens: int, feat: int, hidden: int, rng):
        self.aff1 = Affine(params, f"{name}.aff1", feat)
        self.token_mix = Linear(params, f"{name}.token_mix", tokens, tokens, rng)
        self.aff2 = Affine(params, f"{name}.aff2", feat)
        self.mlp_up = Linear(params, f"{name}.mlp_up", feat, hidden, rng)
        self.mlp_down = Linear(params, f"{name}.mlp_down", hidden, feat, rng)

    def __call__(self, x: Tensor) -> Tensor:
        mixed = self.token_mix(ad.transpose(self.aff1(x), (0, 2, 1)))
        x = x + ad.transpose(mixed, (0, 2, 1))
        return x + self.mlp_down(ad.gelu(self.mlp_up(self.aff2(x))))


class ResMLPModel(Model):
    """Token-mixing residual MLP; slices are the tokens, no patch embedding."""

    def __init__(self, spec: ModelSpec, rng):
        super().__init__(spec)
        feat = spec.effective_in
        self.blocks = [
            _ResMLPBlock(self._params, f"block{i}", spec.tokens, feat, spec.latent, rng)
            for i in range(spec.depth)
        ]
        self.head = Linear(self._params, "head", feat, spec.out_features, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self._prepare(x)
        for block in self.blocks:
            h = block(h)
        return self.head(h)


class TransformerEncoderModel(Model):
    """Pre-norm encoder stack with multi-head self-attention over slices."""

    def __init__(self, spec: ModelSpec, rng):
        super().__init__(spec)
        self.embed = Linear(self._params, "embed", spec.effective_in, spec.latent, rng)
        self.blocks = [
            _EncoderBlock(self._params, f"block{i}", spec.latent, spec.heads, rng)
            for i in range(spec.depth)
        ]
        self.head = Linear(self._params, "head", spec.latent, spec.out_features, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.embed(self._prepare(x))
        for block in self.blocks:
            h = block(h)
        return self.head(h)


class PerceiverIOModel(Model):
    """Cross-attention to a small latent array; attention cost linear in D."""

    def __init__(self, spec: ModelSpec, rng):
        super().__init__(spec)
        m, l = spec.latent, spec.latent_len
        self.embed = Linear(self._params, "embed", spec.effective_in, m, rng)
        self.latents = self._params.new("latents", rng.normal(0.0, 0.02, (l, m)))
        self.enc_ln_q = LayerNorm(self._params, "enc.ln_q", m)
        self.enc_ln_kv = LayerNorm(self._params, "enc.ln_kv", m)
        self.enc_attn = MultiHeadAttention(self._params, "enc.attn", m, spec.heads, rng)
        self.blocks = [
            _EncoderBlock(self._params, f"block{i}", m, spec.heads, rng)
            for i in range(spec.depth)
        ]
        self.queries = self._params.new(
            "out_queries", rng.normal(0.0, 0.02, (spec.tokens, m))
        )
        self.dec_ln_q = LayerNorm(self._params, "dec.ln_q", m)
        self.dec_ln_kv = LayerNorm(self._params, "dec.ln_kv", m)
        self.dec_attn = MultiHeadAttention(self._params, "dec.attn", m, spec.heads, rng)
        self.head = Linear(self._params, "head", m, spec.out_features, rng)

    def forward(self, x: Tensor) -> Tensor:
        m, l = self.spec.latent, self.spec.latent_len
        tokens = self.embed(self._prepare(x))
        lat = self.latents.reshape(1, l, m)
        lat = lat + self.enc_attn(self.enc_ln_q(lat), self.enc_ln_kv(tokens))
        for block in self.blocks:
            lat = block(lat)
        queries = self.queries.reshape(1, self.spec.tokens, m)
        decoded = queries + self.dec_attn(self.dec_ln_q(queries), self.dec_ln_kv(lat))
        return self.head(decoded)


_BUILDERS = {
    ARCH_MLP: MLPModel,
    ARCH_RESMLP: ResMLPModel,
    ARCH_TRANSFORMER: TransformerEncoderModel,
    ARCH_PERCEIVER: PerceiverIOModel,
}


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Instantiate the architecture named by the spec with seeded init."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    return _BUILDERS[spec.arch](spec, rng)
