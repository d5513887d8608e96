"""RWKV-7 block primitives: element projections, delta-rule state recurrence
in sequential and chunk-parallel form, time mixing and channel mixing.

Everything is plain numpy and dtype-preserving: float64 for oracle work,
float32 for benchmarks. A block holds no state of its own; callers own a
RecurrentState that is advanced in place, so one state means one stream and
distinct streams never share mutable data.

Conventions: tokens are row vectors, projections apply as ``x @ W``. The
per-head state matrix S has shape (head_dim, head_dim) with value channels
as rows and key channels as columns, i.e. a fresh write is the outer product
``v^T k_replace`` and the readout is ``S @ r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

NORM_EPS = 1e-5
# epsilon inside the removal-key L2 norm; degenerate (all-zero) keys then
# normalize to zero instead of dividing by zero
KAPPA_EPS = 1e-12
# gain on the decay exponent: w = exp(-DECAY_GAIN * sigmoid(...)), which pins
# every decay component into (exp(-DECAY_GAIN), 1)
DECAY_GAIN = float(np.exp(-0.5))
W_LOWER_BOUND = float(np.exp(-DECAY_GAIN))

# default sub-chunk length of the parallel path; small enough that the
# intra-chunk decay products stay well above float32 underflow of accuracy
DEFAULT_CHUNK = 16


def sigmoid(x):
    # exp overflow for very negative x saturates to 0, which is the limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def lerp(a, b, mix):
    """Linear interpolation a + (b - a) * mix, elementwise.

    Used for token shift: mix=0 keeps the current token, mix=1 takes the
    previous one.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    mix = np.asarray(mix)
    if a.shape[-1] != b.shape[-1] or a.shape[-1] != mix.shape[-1]:
        raise ShapeError(
            f"lerp operands disagree: {a.shape} vs {b.shape} vs {mix.shape}"
        )
    return a + (b - a) * mix


_ACTIVATIONS = {
    "identity": lambda x: x,
    "tanh": np.tanh,
    "sigmoid": sigmoid,
}


def loramlp(act: str, x, A, B, lam=None, bias: bool = True):
    """Low-rank MLP ``f(x @ A) @ B (+ lam)``.

    `act` is one of "identity", "tanh", "sigmoid" and is applied to the
    low-rank intermediate, not the output.
    """
    try:
        f = _ACTIVATIONS[act]
    except KeyError:
        raise ConfigError(f"unknown activation tag {act!r}") from None
    x = np.asarray(x)
    if x.shape[-1] != A.shape[0] or A.shape[1] != B.shape[0]:
        raise ShapeError(
            f"loramlp shapes do not chain: x{x.shape} A{A.shape} B{B.shape}"
        )
    out = f(x @ A) @ B
    if bias:
        if lam is None:
            raise ContractError("bias=True requires a bias vector")
        out = out + lam
    return out


def layer_norm(x, weight, bias, eps: float = NORM_EPS):
    """LayerNorm over the last axis with learned affine."""
    x = np.asarray(x)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * weight + bias


@dataclass
class LoraParams:
    """Factors of one low-rank MLP; `bias` is the lambda vector."""

    A: np.ndarray  # (d, rank)
    B: np.ndarray  # (rank, d)
    bias: np.ndarray  # (d,)

    @property
    def rank(self) -> int:
        return self.A.shape[1]


@dataclass
class RwkvBlockParams:
    """All learned tensors of one RWKV-7 block.

    Mix vectors steer the token shift, the four square projections produce
    receptance/key/value/output, the lora factors produce decay, in-context
    learning rate, value-residual mix and gate, and k_k / k_a / r_k are the
    per-channel scales on removal key, replacement key and readout bonus.
    """

    d: int
    n_heads: int
    # token-shift mix vectors, each component in [0, 1]
    mu_r: np.ndarray
    mu_w: np.ndarray
    mu_k: np.ndarray
    mu_v: np.ndarray
    mu_a: np.ndarray
    mu_g: np.ndarray
    mu_ffn: np.ndarray
    # square projections (d, d)
    W_r: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    # channel-mix projections
    W_ffn_k: np.ndarray  # (d, h_ff)
    W_ffn_v: np.ndarray  # (h_ff, d)
    # low-rank MLPs
    lora_w: LoraParams
    lora_a: LoraParams
    lora_v: LoraParams
    lora_g: LoraParams  # bias unused: the gate runs bias-free
    # per-channel learned vectors
    k_k: np.ndarray  # removal-key scale
    k_a: np.ndarray  # replacement-key mix depth
    r_k: np.ndarray  # readout bonus gain
    # norm affines; identity by default
    ln1_w: np.ndarray
    ln1_b: np.ndarray
    ln2_w: np.ndarray
    ln2_b: np.ndarray
    ln_out_w: np.ndarray
    ln_out_b: np.ndarray

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def h_ff(self) -> int:
        return self.W_ffn_k.shape[1]

    def validate(self) -> None:
        if self.d % self.n_heads != 0:
            raise ConfigError(f"n_heads={self.n_heads} must divide d={self.d}")
        for name in ("mu_r", "mu_w", "mu_k", "mu_v", "mu_a", "mu_g", "mu_ffn"):
            mu = getattr(self, name)
            if mu.shape != (self.d,):
                raise ShapeError(f"{name} must have shape ({self.d},)")
            if np.any(mu < 0.0) or np.any(mu > 1.0):
                raise ConfigError(f"{name} components must lie in [0, 1]")
        for name in ("W_r", "W_k", "W_v", "W_o"):
            if getattr(self, name).shape != (self.d, self.d):
                raise ShapeError(f"{name} must be ({self.d}, {self.d})")
        if self.W_ffn_k.shape[0] != self.d or self.W_ffn_v.shape != (
            self.W_ffn_k.shape[1],
            self.d,
        ):
            raise ShapeError("channel-mix projections do not chain d -> h_ff -> d")
        for name in ("lora_w", "lora_a", "lora_v", "lora_g"):
            lora = getattr(self, name)
            if not 1 <= lora.rank <= self.d:
                raise ConfigError(f"{name} rank must be in [1, {self.d}]")
            if lora.A.shape != (self.d, lora.rank) or lora.B.shape != (
                lora.rank,
                self.d,
            ):
                raise ShapeError(f"{name} factors do not chain d -> rank -> d")


def default_rank(d: int) -> int:
    return max(1, d // 4)


def random_block_params(
    d: int,
    n_heads: int = 1,
    *,
    seed: int,
    h_ff: int | None = None,
    rank: int | None = None,
    dtype=np.float64,
    scale: float = 1.0,
) -> RwkvBlockParams:
    """Seeded random parameters at sane magnitudes for tests and benchmarks."""
    if h_ff is None:
        h_ff = 4 * d
    if rank is None:
        rank = default_rank(d)
    rng = np.random.default_rng(seed)

    def mat(m, n, s):
        return (rng.standard_normal((m, n)) * s).astype(dtype)

    def vec(n, s=1.0, loc=0.0):
        return (loc + rng.standard_normal(n) * s).astype(dtype)

    def mix():
        return rng.uniform(0.0, 1.0, d).astype(dtype)

    def lora(bias_scale):
        return LoraParams(
            A=mat(d, rank, scale / np.sqrt(d)),
            B=mat(rank, d, scale / np.sqrt(rank)),
            bias=vec(d, bias_scale),
        )

    params = RwkvBlockParams(
        d=d,
        n_heads=n_heads,
        mu_r=mix(),
        mu_w=mix(),
        mu_k=mix(),
        mu_v=mix(),
        mu_a=mix(),
        mu_g=mix(),
        mu_ffn=mix(),
        W_r=mat(d, d, scale / np.sqrt(d)),
        W_k=mat(d, d, scale / np.sqrt(d)),
        W_v=mat(d, d, scale / np.sqrt(d)),
        W_o=mat(d, d, scale / np.sqrt(d)),
        W_ffn_k=mat(d, h_ff, scale / np.sqrt(d)),
        W_ffn_v=mat(h_ff, d, scale / np.sqrt(h_ff)),
        lora_w=lora(1.0),
        lora_a=lora(0.5),
        lora_v=lora(0.5),
        lora_g=lora(0.0),
        k_k=rng.uniform(0.5, 0.9, d).astype(dtype),
        k_a=rng.uniform(0.9, 1.1, d).astype(dtype),
        r_k=vec(d, 0.1),
        ln1_w=np.ones(d, dtype=dtype),
        ln1_b=np.zeros(d, dtype=dtype),
        ln2_w=np.ones(d, dtype=dtype),
        ln2_b=np.zeros(d, dtype=dtype),
        ln_out_w=np.ones(d, dtype=dtype),
        ln_out_b=np.zeros(d, dtype=dtype),
    )
    params.validate()
    return params


@dataclass
class RecurrentState:
    """The entire memory of one stream.

    Byte size depends only on (d, n_heads, n_layers): consuming more tokens
    never grows it.
    """

    S: np.ndarray  # (n_layers, n_heads, head_dim, head_dim)
    shift_tm: np.ndarray  # (n_layers, d) previous token seen by time mixing
    shift_cm: np.ndarray  # (n_layers, d) previous token seen by channel mixing
    tokens_seen: int = 0

    @classmethod
    def zeros(cls, d: int, n_heads: int, n_layers: int = 1, dtype=np.float64):
        if d % n_heads != 0:
            raise ConfigError(f"n_heads={n_heads} must divide d={d}")
        hd = d // n_heads
        return cls(
            S=np.zeros((n_layers, n_heads, hd, hd), dtype=dtype),
            shift_tm=np.zeros((n_layers, d), dtype=dtype),
            shift_cm=np.zeros((n_layers, d), dtype=dtype),
            tokens_seen=0,
        )

    @property
    def n_layers(self) -> int:
        return self.S.shape[0]

    @property
    def nbytes(self) -> int:
        return self.S.nbytes + self.shift_tm.nbytes + self.shift_cm.nbytes

    def copy(self) -> "RecurrentState":
        return RecurrentState(
            S=self.S.copy(),
            shift_tm=self.shift_tm.copy(),
            shift_cm=self.shift_cm.copy(),
            tokens_seen=self.tokens_seen,
        )


@dataclass
class ElementSet:
    """Per-token projections feeding the delta rule.

    Arrays are (d,) for a single token, (T, d) for a chunk. `k_removal` is
    the raw (unnormalized) removal key; consumers normalize per head.
    `v0` is the layer-0 value used by the value residual of deeper layers.
    """

    r: np.ndarray
    w: np.ndarray
    k: np.ndarray
    k_removal: np.ndarray
    k_replace: np.ndarray
    v: np.ndarray
    a: np.ndarray
    g: np.ndarray
    nu: np.ndarray
    v0: np.ndarray


def _split_heads(x, n_heads: int):
    """(..., d) -> (..., n_heads, head_dim)"""
    return x.reshape(*x.shape[:-1], n_heads, x.shape[-1] // n_heads)


def _normalize_removal(k_removal_heads):
    """Per-head L2 normalization with epsilon inside the norm."""
    norm = np.sqrt(
        np.sum(k_removal_heads * k_removal_heads, axis=-1, keepdims=True) + KAPPA_EPS
    )
    return k_removal_heads / norm, norm


def _compute_elements(x, x_prev, params: RwkvBlockParams, layer: int, v0):
    """Element equations for a batch of rows; x, x_prev are (T, d)."""
    xr = lerp(x, x_prev, params.mu_r)
    xw = lerp(x, x_prev, params.mu_w)
    xk = lerp(x, x_prev, params.mu_k)
    xv = lerp(x, x_prev, params.mu_v)
    xa = lerp(x, x_prev, params.mu_a)
    xg = lerp(x, x_prev, params.mu_g)

    r = xr @ params.W_r
    w = np.exp(
        -DECAY_GAIN
        * sigmoid(loramlp("tanh", xw, params.lora_w.A, params.lora_w.B, params.lora_w.bias))
    )
    k = xk @ params.W_k
    k_removal = k * params.k_k
    a = sigmoid(
        loramlp("identity", xa, params.lora_a.A, params.lora_a.B, params.lora_a.bias)
    )
    k_replace = k * lerp(np.ones_like(a), a, params.k_a)
    nu = sigmoid(
        loramlp("identity", xv, params.lora_v.A, params.lora_v.B, params.lora_v.bias)
    )
    v_layer = xv @ params.W_v
    if layer == 0:
        v = v_layer
        v0_out = v_layer
    else:
        v = lerp(v0, v_layer, nu)
        v0_out = v0
    g = loramlp("sigmoid", xg, params.lora_g.A, params.lora_g.B, bias=False)
    return ElementSet(
        r=r, w=w, k=k, k_removal=k_removal, k_replace=k_replace,
        v=v, a=a, g=g, nu=nu, v0=v0_out,
    )


def project_elements(
    x_t,
    params: RwkvBlockParams,
    state: RecurrentState,
    layer: int = 0,
    v0=None,
) -> ElementSet:
    """Compute all elements for one token and advance the time-mix shift cache."""
    if layer >= 1 and v0 is None:
        raise ContractError("layers >= 1 need the layer-0 value v0")
    x_t = np.asarray(x_t)
    if x_t.shape != (params.d,):
        raise ShapeError(f"token must have shape ({params.d},), got {x_t.shape}")
    x = x_t[None, :]
    x_prev = state.shift_tm[layer][None, :]
    v0_rows = None if v0 is None else np.asarray(v0)[None, :]
    e = _compute_elements(x, x_prev, params, layer, v0_rows)
    state.shift_tm[layer] = x_t
    return ElementSet(**{f: getattr(e, f)[0] for f in e.__dataclass_fields__})


def project_elements_seq(
    X,
    params: RwkvBlockParams,
    state: RecurrentState,
    layer: int = 0,
    v0_seq=None,
) -> ElementSet:
    """Vectorized element projection for a chunk of T tokens (rows of X)."""
    if layer >= 1 and v0_seq is None:
        raise ContractError("layers >= 1 need the layer-0 value sequence")
    X = np.asarray(X)
    x_prev = np.vstack([state.shift_tm[layer][None, :], X[:-1]])
    e = _compute_elements(X, x_prev, params, layer, v0_seq)
    state.shift_tm[layer] = X[-1]
    return e


def state_step(S_prev, e: ElementSet):
    """One delta-rule update.

    S_new = S_prev @ (diag(w) - khat^T (a * khat)) + v^T k_replace, applied
    independently per head; khat is the L2-normalized removal key.
    """
    H, dv, dk = S_prev.shape
    w = _split_heads(e.w, H)
    a = _split_heads(e.a, H)
    v = _split_heads(e.v, H)
    k_rep = _split_heads(e.k_replace, H)
    khat, _ = _normalize_removal(_split_heads(e.k_removal, H))
    if not (
        np.isfinite(w).all()
        and np.isfinite(a).all()
        and np.isfinite(v).all()
        and np.isfinite(k_rep).all()
        and np.isfinite(khat).all()
    ):
        raise NumericError("non-finite element reached state_step")
    decayed = S_prev * w[:, None, :]
    removed = (S_prev @ khat[:, :, None]) * (a * khat)[:, None, :]
    written = v[:, :, None] * k_rep[:, None, :]
    return decayed - removed + written


def decay_matrix(w_rows):
    """Causal decay tensor: delta[i, j] = prod_{m=j..i} w_m componentwise for
    j <= i, zero above the diagonal. Shape (B, B, d)."""
    w_rows = np.asarray(w_rows)
    if w_rows.ndim != 2:
        raise ShapeError("decay_matrix expects (B, d) stacked decay rows")
    B, d = w_rows.shape
    if B < 1:
        raise ShapeError("decay_matrix needs at least one row")
    delta = np.zeros((B, B, d), dtype=w_rows.dtype)
    delta[0, 0] = w_rows[0]
    for i in range(1, B):
        delta[i, :i] = delta[i - 1, :i] * w_rows[i]
        delta[i, i] = w_rows[i]
    return delta


@dataclass
class ChunkMatrices:
    """Stacked per-chunk quantities for the parallel path.

    delta is the causal decay tensor; u stacks a / ||k_removal||_2, k_replace
    and v stack replacement keys and values, k_removal stacks the raw removal
    keys (needed to recover the normalized keys inside the kernel).
    """

    delta: np.ndarray  # (B, B, d)
    u: np.ndarray  # (B, d)
    k_replace: np.ndarray  # (B, d)
    v: np.ndarray  # (B, d)
    k_removal: np.ndarray  # (B, d)
    length: int

    def validate(self) -> None:
        B = self.length
        if self.delta.shape[:2] != (B, B):
            raise ShapeError("delta must be (B, B, d)")
        iu = np.triu_indices(B, k=1)
        if np.any(self.delta[iu] != 0.0):
            raise ShapeError("delta must be lower-triangular in its step indices")


def build_chunk_matrices(e: ElementSet, n_heads: int) -> ChunkMatrices:
    """Assemble the stacked chunk matrices from a batch ElementSet."""
    B = e.w.shape[0]
    _, norm = _normalize_removal(_split_heads(e.k_removal, n_heads))
    u = (_split_heads(e.a, n_heads) / norm).reshape(B, -1)
    return ChunkMatrices(
        delta=decay_matrix(e.w),
        u=u,
        k_replace=e.k_replace,
        v=e.v,
        k_removal=e.k_removal,
        length=B,
    )


def _chunk_solve(S_in, mats: ChunkMatrices, n_heads: int):
    """Shared core of the parallel path.

    Works in a representation where every cross-step coupling is a product
    of decay components (each <= 1), so no reciprocal of a deep cumulative
    decay ever appears; a single unit-lower-triangular solve per head
    recovers the per-step state readouts m_t = S_{t-1} khat_t^T.

    Returns (m, brow, k_rep, v, E2, F2) where E2[t, s] is the decay a step-s
    write experiences by the end of step t and F2[t] the decay of the
    incoming state.
    """
    B = mats.length
    H = n_heads
    khat, _ = _normalize_removal(_split_heads(mats.k_removal, H))  # (B,H,K)
    # removal row of the transition: transition_t = diag(w_t) + khat_t^T brow_t
    brow = -_split_heads(mats.u, H) * _split_heads(mats.k_removal, H)
    v = _split_heads(mats.v, H)
    k_rep = _split_heads(mats.k_replace, H)
    hd = khat.shape[-1]
    delta = mats.delta.reshape(B, B, H, hd)

    E2 = np.zeros_like(delta)
    idx = np.arange(B)
    E2[idx, idx] = 1.0
    if B > 1:
        il, jl = np.tril_indices(B, k=-1)
        E2[il, jl] = delta[il, jl + 1]
    # shifted variants: couplings into the readout at step t see decays only
    # up to step t-1
    E1 = np.zeros_like(E2)
    E1[1:] = E2[:-1]
    F2 = delta[:, 0]  # (B, H, K): prod of w over 0..t
    F1 = np.empty_like(F2)
    F1[0] = 1.0
    F1[1:] = F2[:-1]

    # readout of the incoming state at each step, pre-solve
    h_rows = np.einsum("hvk,bhk->hbv", S_in, F1 * khat)
    # couplings between the step-s transition/write and the step-t readout
    L = np.einsum("shk,thk,tshk->hts", brow, khat, E1)
    G = np.einsum("shk,thk,tshk->hts", k_rep, khat, E1)
    rhs = h_rows + np.einsum("hts,shv->htv", G, v)
    eye = np.eye(B, dtype=S_in.dtype)
    m = np.linalg.solve(eye - L, rhs)  # (H, B, V)
    return m, brow, k_rep, v, E2, F2


def _chunk_kernel(S_in, mats: ChunkMatrices, n_heads: int):
    """All B states of one chunk via batched linear algebra."""
    m, brow, k_rep, v, E2, F2 = _chunk_solve(S_in, mats, n_heads)
    # per-step state increment: removal correction plus fresh write
    P = np.einsum("hbv,bhk->bhvk", m, brow) + np.einsum("bhv,bhk->bhvk", v, k_rep)
    states = np.einsum("hvk,bhk->bhvk", S_in, F2) + np.einsum(
        "shvk,tshk->thvk", P, E2
    )
    return states


def _chunk_readouts(S_in, mats: ChunkMatrices, r_heads, n_heads: int):
    """Per-token readouts y_t = S_t r_t^T and the final state, without
    materializing intermediate states.

    The states enter the outputs only through attention-style score
    matrices between the receptance rows and the (decayed) write rows,
    which is a factor head_dim cheaper than building every state.
    """
    m, brow, k_rep, v, E2, F2 = _chunk_solve(S_in, mats, n_heads)
    y = np.einsum("hvk,thk->thv", S_in, F2 * r_heads)
    scores_rm = np.einsum("shk,thk,tshk->hts", brow, r_heads, E2)
    scores_wr = np.einsum("shk,thk,tshk->hts", k_rep, r_heads, E2)
    y += np.einsum("hts,hsv->thv", scores_rm, m)
    y += np.einsum("hts,shv->thv", scores_wr, v)
    decay_end = E2[-1]  # (B, H, K)
    S_out = S_in * F2[-1][:, None, :]
    S_out += np.einsum("hsv,shk->hvk", m, brow * decay_end)
    S_out += np.einsum("shv,shk->hvk", v, k_rep * decay_end)
    return y, S_out


def chunk_forward(S_in, e: ElementSet, max_chunk: int = DEFAULT_CHUNK):
    """Delta-rule states for a whole chunk, equal to repeated state_step.

    Returns (states, S_out) where states[t] is the per-head state after
    consuming token t and S_out is states[-1]. Long chunks are processed in
    sub-chunks of max_chunk steps, carrying the state across.
    """
    H = S_in.shape[0]
    B = e.w.shape[0]
    if B < 1:
        raise ShapeError("chunk_forward needs at least one token")
    if not (np.isfinite(e.w).all() and np.isfinite(e.v).all()):
        raise NumericError("non-finite element reached chunk_forward")
    states = np.empty((B,) + S_in.shape, dtype=S_in.dtype)
    S = S_in
    for lo in range(0, B, max_chunk):
        hi = min(lo + max_chunk, B)
        sub = ElementSet(
            **{f: getattr(e, f)[lo:hi] for f in e.__dataclass_fields__}
        )
        mats = build_chunk_matrices(sub, H)
        states[lo:hi] = _chunk_kernel(S, mats, H)
        S = states[hi - 1]
    return states, S


def _finish_readout(e: ElementSet, y, params: RwkvBlockParams):
    """Per-head LayerNorm, readout bonus, gate and output projection.

    `y` holds the raw state readouts S_t r_t, shaped (T, n_heads, head_dim).
    """
    H = params.n_heads
    r = _split_heads(e.r, H)
    k_rep = _split_heads(e.k_replace, H)
    v = _split_heads(e.v, H)
    r_k = _split_heads(params.r_k, H)
    mean = y.mean(axis=-1, keepdims=True)
    var = y.var(axis=-1, keepdims=True)
    yn = (y - mean) / np.sqrt(var + NORM_EPS)
    p = yn.reshape(y.shape[0], -1) * params.ln_out_w + params.ln_out_b
    bonus = np.sum(r * (r_k * k_rep), axis=-1, keepdims=True) * v
    p = p + bonus.reshape(p.shape)
    if not np.isfinite(p).all():
        raise NumericError("non-finite time-mix readout")
    return (e.g * p) @ params.W_o


def _readout(e: ElementSet, states, params: RwkvBlockParams):
    """Time-mix readout for stacked elements/states; returns (T, d)."""
    y = np.einsum("thvk,thk->thv", states, _split_heads(e.r, params.n_heads))
    return _finish_readout(e, y, params)


def time_mix_output(e: ElementSet, S_t, params: RwkvBlockParams):
    """Gated time-mix output for one token given its post-update state."""
    batch = ElementSet(**{f: getattr(e, f)[None, :] for f in e.__dataclass_fields__})
    return _readout(batch, S_t[None, ...], params)[0]


def channel_mix(
    x_t, params: RwkvBlockParams, state: RecurrentState, layer: int = 0
):
    """Squared-ReLU channel mixing with its own token shift cache."""
    x_t = np.asarray(x_t)
    h = lerp(x_t, state.shift_cm[layer], params.mu_ffn) @ params.W_ffn_k
    state.shift_cm[layer] = x_t
    return np.square(np.maximum(h, 0.0)) @ params.W_ffn_v


def _channel_mix_seq(X, params: RwkvBlockParams, state: RecurrentState, layer: int):
    x_prev = np.vstack([state.shift_cm[layer][None, :], X[:-1]])
    h = lerp(X, x_prev, params.mu_ffn) @ params.W_ffn_k
    state.shift_cm[layer] = X[-1]
    return np.square(np.maximum(h, 0.0)) @ params.W_ffn_v


# tokens per outer tile of the chunked path
_CHUNK_TILE = 512


def _chunked_tile(
    tokens,
    params: RwkvBlockParams,
    state: RecurrentState,
    layer: int,
    v0_seq,
    max_chunk: int,
):
    """One tile of the chunk-parallel path: project, recur, read out, mix."""
    xn = layer_norm(tokens, params.ln1_w, params.ln1_b)
    e = project_elements_seq(xn, params, state, layer, v0_seq)
    H = params.n_heads
    r = _split_heads(e.r, H)
    T = tokens.shape[0]
    y = np.empty((T, H, params.head_dim), dtype=tokens.dtype)
    S = state.S[layer]
    for lo in range(0, T, max_chunk):
        hi = min(lo + max_chunk, T)
        sub = ElementSet(
            **{f: getattr(e, f)[lo:hi] for f in e.__dataclass_fields__}
        )
        y[lo:hi], S = _chunk_readouts(
            S, build_chunk_matrices(sub, H), r[lo:hi], H
        )
    state.S[layer] = S
    x = tokens + _finish_readout(e, y, params)
    xn2 = layer_norm(x, params.ln2_w, params.ln2_b)
    return x + _channel_mix_seq(xn2, params, state, layer), e.v0


def block_apply(
    tokens,
    params: RwkvBlockParams,
    state: RecurrentState,
    layer: int = 0,
    v0_seq=None,
    mode: str = "sequential",
    max_chunk: int = DEFAULT_CHUNK,
):
    """Run one block over `tokens`, mutating `state` at `layer`.

    Returns (outputs, v0_seq) where v0_seq stacks the layer-0 values needed
    by deeper layers of a stack. Both modes produce the same outputs and the
    same final state; sequential iterates the recurrence token by token,
    chunked batches it through the parallel form.
    """
    if mode not in ("sequential", "chunked"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "chunked" and max_chunk < 1:
        raise ConfigError("chunked mode needs max_chunk >= 1")
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != params.d:
        if tokens.size == 0:
            tokens = tokens.reshape(0, params.d)
        else:
            raise ShapeError(
                f"tokens must be (T, {params.d}), got {tokens.shape}"
            )
    T = tokens.shape[0]
    if T == 0:
        return tokens.copy(), np.zeros((0, params.d), dtype=tokens.dtype)

    if mode == "sequential":
        out = np.empty_like(tokens)
        v0_out = np.empty_like(tokens)
        for t in range(T):
            x = tokens[t]
            xn = layer_norm(x, params.ln1_w, params.ln1_b)
            v0_t = None if v0_seq is None else v0_seq[t]
            e = project_elements(xn, params, state, layer, v0_t)
            S_new = state_step(state.S[layer], e)
            state.S[layer] = S_new
            x = x + time_mix_output(e, S_new, params)
            xn2 = layer_norm(x, params.ln2_w, params.ln2_b)
            x = x + channel_mix(xn2, params, state, layer)
            out[t] = x
            v0_out[t] = e.v0
    else:
        # outer tiles bound the working set so long sequences stay cache
        # resident; the recurrence semantics are tile-invariant because all
        # cross-token memory lives in `state`
        out = np.empty_like(tokens)
        v0_out = np.empty_like(tokens)
        for lo in range(0, T, _CHUNK_TILE):
            hi = min(lo + _CHUNK_TILE, T)
            v0_tile = None if v0_seq is None else v0_seq[lo:hi]
            out[lo:hi], v0_out[lo:hi] = _chunked_tile(
                tokens[lo:hi], params, state, layer, v0_tile, max_chunk
            )
    state.tokens_seen += T
    return out, v0_out


def block_forward(
    tokens,
    params: RwkvBlockParams,
    state: RecurrentState,
    mode: str = "sequential",
    max_chunk: int = DEFAULT_CHUNK,
):
    """Single-block forward (layer 0 semantics). Returns (outputs, state)."""
    out, _ = block_apply(tokens, params, state, 0, None, mode, max_chunk)
    return out, state


def forward_stack(
    tokens,
    blocks: list[RwkvBlockParams],
    state: RecurrentState,
    mode: str = "sequential",
    max_chunk: int = DEFAULT_CHUNK,
):
    """Run a stack of blocks, threading the layer-0 value residual through."""
    if state.n_layers < len(blocks):
        raise ConfigError(
            f"state has {state.n_layers} layers, stack needs {len(blocks)}"
        )
    x = np.asarray(tokens)
    v0_seq = None
    tokens_in = x.shape[0] if x.ndim == 2 else 0
    for layer, params in enumerate(blocks):
        x, v0 = block_apply(x, params, state, layer, v0_seq, mode, max_chunk)
        if layer == 0:
            v0_seq = v0
    # block_apply counts tokens once per layer; a stack consumes them once
    if blocks and tokens_in:
        state.tokens_seen -= tokens_in * (len(blocks) - 1)
    return x
