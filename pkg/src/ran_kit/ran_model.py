"""Encoder, coverage attention, GRU decoder, and beam search.

The network maps a glyph bitmap to a caption over the decomposition
grammar. A fully convolutional encoder produces a grid of annotation
vectors; the decoder runs two GRU layers per step with a spatial
attention whose energies also see a coverage signal, the convolved sum
of all past attention maps, which pushes the decoder to attend to cells
it has not described yet.

Parameters live in a flat name -> Tensor dict so the optimizer and the
checkpoint format can treat them uniformly. Names are stable:
``enc.b<block>.c<layer>.{w,b}`` for the encoder and ``dec.*`` for
embedding, GRU gates, attention, coverage filter, and the output stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .caption_grammar import Vocabulary
from .glyph_synth import GlyphImage
from .tensor_core import (
    Tensor,
    add,
    conv2d,
    cross_entropy,
    embed,
    matmul,
    maxout2,
    maxpool2,
    mul,
    reshape,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose2d,
)


@dataclass(frozen=True)
class EncoderConfig:
    """Stacked conv blocks; every block ends in a 2x2 ceil-mode maxpool."""

    blocks: tuple
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in self.blocks))
        for layers, channels in self.blocks:
            if layers < 1 or channels < 1:
                raise ValueError(f"bad encoder block ({layers}, {channels})")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("encoder kernel must be odd")

    @classmethod
    def vgg14_s(cls) -> "EncoderConfig":
        return cls(blocks=((3, 32), (3, 64), (4, 128), (4, 256)))

    @classmethod
    def vgg14(cls) -> "EncoderConfig":
        return cls(blocks=((3, 64), (3, 128), (4, 256), (4, 512)))

    @property
    def out_channels(self) -> int:
        return self.blocks[-1][1]

    def grid_shape(self, height: int, width: int):
        for _ in self.blocks:
            height = -(-height // 2)
            width = -(-width // 2)
        return height, width


@dataclass(frozen=True)
class ModelConfig:
    """Full network dimensions. The attention dimension equals D."""

    encoder: EncoderConfig
    vocab_size: int
    m: int = 256  # embedding / pre-output width
    n: int = 256  # GRU hidden width
    M: int = 256  # coverage feature planes
    coverage_kernel: int = 5

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab needs at least start and end tokens")
        if self.m % 2 != 0:
            raise ValueError("m must be even, the output maxout works on pairs")
        if min(self.m, self.n, self.M) < 1:
            raise ValueError("all widths must be positive")
        if self.coverage_kernel % 2 == 0:
            raise ValueError("coverage kernel must be odd")

    @property
    def D(self) -> int:
        return self.encoder.out_channels

    def to_dict(self) -> dict:
        return {
            "encoder_blocks": [list(b) for b in self.encoder.blocks],
            "encoder_kernel": self.encoder.kernel,
            "vocab_size": self.vocab_size,
            "m": self.m,
            "n": self.n,
            "M": self.M,
            "coverage_kernel": self.coverage_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig(
                blocks=tuple(tuple(b) for b in d["encoder_blocks"]),
                kernel=d["encoder_kernel"],
            ),
            vocab_size=d["vocab_size"],
            m=d["m"],
            n=d["n"],
            M=d["M"],
            coverage_kernel=d["coverage_kernel"],
        )


def micro_model_config(vocab_size: int = 6) -> ModelConfig:
    """One conv block and width-8 everything; small enough to gradcheck."""
    return ModelConfig(
        encoder=EncoderConfig(blocks=((1, 8),)),
        vocab_size=vocab_size,
        m=8,
        n=8,
        M=8,
    )


@dataclass(frozen=True)
class AnnotationGrid:
    """L = H*W annotation vectors of width D, flattened row-major."""

    H: int
    W: int
    D: int
    vectors: Tensor

    def __post_init__(self):
        if self.vectors.shape != (self.H * self.W, self.D):
            raise ValueError(
                f"annotation grid {self.H}x{self.W}x{self.D} does not match "
                f"vector block {self.vectors.shape}"
            )

    @property
    def L(self) -> int:
        return self.H * self.W


@dataclass(frozen=True)
class DecoderState:
    s: Tensor
    alpha_history: tuple = ()
    y_prev: int = 0


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple
    log_prob: float
    state: Optional[DecoderState]
    finished: bool
    finish_step: Optional[int] = None


@dataclass(frozen=True)
class BeamResult:
    caption: str
    log_prob: float
    tokens: tuple
    alphas: tuple


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict:
    """Scaled-uniform weights, zero biases, deterministic in the seed.

    Decoder weights are Glorot uniform. The encoder conv stack draws at
    r = sqrt(3/fan_in) instead, which keeps layer variance at unity in
    the tanh linear regime. Glorot's fan_out term shrinks the signal at
    the 1-to-32-channel first layer and at every block transition, and
    over a 14-layer tanh stack the annotations come out ~30x too small:
    attention then cannot tell grid cells apart and training collapses
    onto a caption-only language model. Larger draws fail the other way
    by saturating every tanh to a constant. The fan_in-only scale is
    load-bearing, not a tuning nicety.
    """
    rng = np.random.default_rng(seed)
    params = {}

    def draw(name, shape, r):
        data = rng.uniform(-r, r, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)

    def weight(name, shape, fan_in, fan_out):
        draw(name, shape, math.sqrt(6.0 / (fan_in + fan_out)))

    def bias(name, size):
        params[name] = Tensor(np.zeros(size, dtype=dtype), requires_grad=True)

    k = config.encoder.kernel
    in_ch = 1
    for bi, (layers, out_ch) in enumerate(config.encoder.blocks):
        for ci in range(layers):
            draw(f"enc.b{bi}.c{ci}.w", (out_ch, in_ch, k, k),
                 math.sqrt(3.0 / (in_ch * k * k)))
            bias(f"enc.b{bi}.c{ci}.b", out_ch)
            in_ch = out_ch

    D, m, n, M, K = config.D, config.m, config.n, config.M, config.vocab_size
    weight("dec.E", (K, m), K, m)
    for gru, in_dim in (("gru1", m), ("gru2", D)):
        for gate in ("z", "r", "h"):
            weight(f"dec.{gru}.{gate}.W", (n, in_dim), in_dim, n)
            weight(f"dec.{gru}.{gate}.U", (n, n), n, n)
            bias(f"dec.{gru}.{gate}.b", n)
    weight("dec.att.v", (D,), D, 1)
    weight("dec.att.W", (D, n), n, D)
    weight("dec.att.Ua", (D, D), D, D)
    weight("dec.att.Uf", (D, M), M, D)
    ck = config.coverage_kernel
    weight("dec.cov.Q", (M, 1, ck, ck), ck * ck, M * ck * ck)
    bias("dec.cov.b", M)
    weight("dec.out.Wo", (K, m // 2), m // 2, K)
    weight("dec.out.Ws", (m, n), n, m)
    weight("dec.out.Wc", (m, D), D, m)
    bias("dec.out.b", m)
    return params


def param_dtype(params: dict):
    return next(iter(params.values())).dtype


def encode_image(img, cfg: EncoderConfig, params: dict) -> AnnotationGrid:
    """Run the conv/tanh/pool stack and flatten the output grid.

    Accepts a GlyphImage or a bare 2-d array of intensities in [0, 1].
    """
    pixels = img.pixels if isinstance(img, GlyphImage) else np.asarray(img)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {pixels.shape}")
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise ValueError("image intensities must lie in [0, 1]")
    x = Tensor(pixels[None, :, :].astype(param_dtype(params)))
    for bi, (layers, _out_ch) in enumerate(cfg.blocks):
        for ci in range(layers):
            x = tanh(conv2d(x, params[f"enc.b{bi}.c{ci}.w"],
                            params[f"enc.b{bi}.c{ci}.b"]))
        x = maxpool2(x)
    D, H, W = x.shape
    vectors = transpose2d(reshape(x, (D, H * W)))
    return AnnotationGrid(H=H, W=W, D=D, vectors=vectors)


def attention_sum(alpha_history, length: int, dtype) -> Tensor:
    """Left-to-right fold of past attention maps.

    The fold is sequential on purpose: the coverage plane after t steps
    is then bitwise equal to the plane after t-1 steps plus the last
    map, which the recursion invariant (and its test) relies on.
    """
    if not alpha_history:
        return Tensor(np.zeros(length, dtype=dtype))
    acc = alpha_history[0]
    for alpha in alpha_history[1:]:
        acc = add(acc, alpha)
    return acc


def coverage_map(alpha_history, Q: Tensor, bias: Tensor, H: int, W: int) -> Tensor:
    """F = Q * sum of past alphas, as M feature planes over the grid."""
    acc = attention_sum(alpha_history, H * W, Q.dtype)
    plane = reshape(acc, (1, H, W))
    return conv2d(plane, Q, bias)


def attend_with_features(s_hat: Tensor, vectors: Tensor, f_cells: Tensor,
                         params: dict):
    """Attention over explicit per-cell coverage features.

    Exposed separately from attend() so properties that permute grid
    cells can permute the coverage features alongside the annotations
    without involving the spatial convolution.
    """
    term_a = matmul(vectors, transpose2d(params["dec.att.Ua"]))
    term_f = matmul(f_cells, transpose2d(params["dec.att.Uf"]))
    term_s = matmul(params["dec.att.W"], s_hat)
    u = tanh(add(add(term_a, term_f), term_s))
    energies = matmul(u, params["dec.att.v"])
    alpha = softmax(energies)
    context = matmul(alpha, vectors)
    return alpha, context


def attend(s_hat: Tensor, grid: AnnotationGrid, alpha_history, params: dict):
    """One attention read: probabilities over cells plus the context vector."""
    F = coverage_map(alpha_history, params["dec.cov.Q"], params["dec.cov.b"],
                     grid.H, grid.W)
    f_cells = transpose2d(reshape(F, (F.shape[0], grid.L)))
    return attend_with_features(s_hat, grid.vectors, f_cells, params)


def _gru_step(x: Tensor, h: Tensor, params: dict, name: str) -> Tensor:
    def gate(g):
        return add(add(matmul(params[f"dec.{name}.{g}.W"], x),
                       matmul(params[f"dec.{name}.{g}.U"], h)),
                   params[f"dec.{name}.{g}.b"])

    z = sigmoid(gate("z"))
    r = sigmoid(gate("r"))
    h_tilde = tanh(add(add(matmul(params[f"dec.{name}.h.W"], x),
                           matmul(params[f"dec.{name}.h.U"], mul(r, h))),
                       params[f"dec.{name}.h.b"]))
    return add(mul(sub(1.0, z), h), mul(z, h_tilde))


def initial_state(config: ModelConfig, dtype, start_index: int = 0) -> DecoderState:
    s0 = Tensor(np.zeros(config.n, dtype=dtype))
    return DecoderState(s=s0, alpha_history=(), y_prev=start_index)


def decode_step(y_prev: int, state: DecoderState, grid: AnnotationGrid,
                params: dict):
    """One decoder step: GRU1, attention read, GRU2, maxout output head."""
    Ey = embed(y_prev, params["dec.E"])
    s_hat = _gru_step(Ey, state.s, params, "gru1")
    alpha, context = attend(s_hat, grid, state.alpha_history, params)
    s_t = _gru_step(context, s_hat, params, "gru2")
    pre = add(add(add(Ey, matmul(params["dec.out.Ws"], s_t)),
                  matmul(params["dec.out.Wc"], context)),
              params["dec.out.b"])
    probs = softmax(matmul(params["dec.out.Wo"], maxout2(pre)))
    new_state = DecoderState(s=s_t,
                             alpha_history=state.alpha_history + (alpha,),
                             y_prev=y_prev)
    return probs, new_state


def forward_teacher_forced(img, target_indices, config: ModelConfig,
                           params: dict, start_index: int = 0,
                           end_index: int = 1):
    """Summed cross-entropy along a ground-truth caption.

    target_indices must run from the start token to the end token; the
    prediction at step t is conditioned on the true token at t-1.
    Returns the scalar loss node and the per-step attention maps.
    """
    target = list(target_indices)
    if len(target) < 2:
        raise ValueError("target must hold at least start and end tokens")
    if target[0] != start_index or target[-1] != end_index:
        raise ValueError(
            f"target must start at index {start_index} and end at {end_index}"
        )
    grid = encode_image(img, config.encoder, params)
    state = initial_state(config, param_dtype(params), start_index)
    total = None
    for t in range(1, len(target)):
        probs, state = decode_step(target[t - 1], state, grid, params)
        step_loss = cross_entropy(probs, target[t])
        total = step_loss if total is None else add(total, step_loss)
    return total, state.alpha_history


@dataclass(frozen=True)
class _SessionState:
    """Lightweight decoder state for the array-only inference path."""

    s: np.ndarray
    acc_alpha: np.ndarray
    alphas: tuple = ()


class _InferenceSession:
    """Array-only decoder over one fixed annotation grid.

    Beam search repeats decode steps hundreds of times per image, and
    the graph-building path pays node bookkeeping it never uses there.
    This session precomputes everything reusable (stacked GRU gate
    matrices, the annotation projection, the coverage filter as a
    matrix) and steps with plain numpy calls. The arithmetic mirrors
    decode_step; a test pins the two paths together.
    """

    def __init__(self, grid: AnnotationGrid, params: dict, config: ModelConfig):
        def arr(name):
            return np.asarray(params[name].data)

        self.H, self.W, self.L = grid.H, grid.W, grid.L
        self.K = config.vocab_size
        self.n = config.n
        self.dtype = param_dtype(params)
        self.vectors = np.asarray(grid.vectors.data)
        self.E = arr("dec.E")
        self.gru = {}
        for name in ("gru1", "gru2"):
            self.gru[name] = (
                np.vstack([arr(f"dec.{name}.z.W"), arr(f"dec.{name}.r.W")]),
                np.vstack([arr(f"dec.{name}.z.U"), arr(f"dec.{name}.r.U")]),
                np.concatenate([arr(f"dec.{name}.z.b"), arr(f"dec.{name}.r.b")]),
                arr(f"dec.{name}.h.W"),
                arr(f"dec.{name}.h.U"),
                arr(f"dec.{name}.h.b"),
            )
        self.proj_a = self.vectors @ arr("dec.att.Ua").T
        self.Uf_T = arr("dec.att.Uf").T
        self.att_W = arr("dec.att.W")
        self.att_v = arr("dec.att.v")
        ck = config.coverage_kernel
        self.cov_pad = ck // 2
        self.cov_Q = arr("dec.cov.Q").reshape(config.M, ck * ck)
        self.cov_b = arr("dec.cov.b")
        self.cov_k = ck
        self.out_Wo = arr("dec.out.Wo")
        self.out_Ws = arr("dec.out.Ws")
        self.out_Wc = arr("dec.out.Wc")
        self.out_b = arr("dec.out.b")

    def initial_state(self) -> _SessionState:
        return _SessionState(
            s=np.zeros(self.n, dtype=self.dtype),
            acc_alpha=np.zeros(self.L, dtype=self.dtype),
        )

    def _gru(self, x, h, name):
        W_zr, U_zr, b_zr, W_h, U_h, b_h = self.gru[name]
        zr = 1.0 / (1.0 + np.exp(-(W_zr @ x + U_zr @ h + b_zr)))
        z, r = zr[: self.n], zr[self.n:]
        cand = np.tanh(W_h @ x + U_h @ (r * h) + b_h)
        return (1.0 - z) * h + z * cand

    def step(self, y_prev: int, state: _SessionState):
        Ey = self.E[y_prev]
        s_hat = self._gru(Ey, state.s, "gru1")
        pad = self.cov_pad
        plane = np.pad(state.acc_alpha.reshape(self.H, self.W),
                       ((pad, pad), (pad, pad)))
        windows = np.lib.stride_tricks.sliding_window_view(
            plane, (self.cov_k, self.cov_k)
        ).reshape(self.L, self.cov_k * self.cov_k)
        f_cells = windows @ self.cov_Q.T + self.cov_b
        u = np.tanh(self.proj_a + f_cells @ self.Uf_T + self.att_W @ s_hat)
        e = u @ self.att_v
        ex = np.exp(e - e.max())
        alpha = ex / ex.sum()
        context = alpha @ self.vectors
        s_t = self._gru(context, s_hat, "gru2")
        pre = Ey + self.out_Ws @ s_t + self.out_Wc @ context + self.out_b
        logits = self.out_Wo @ pre.reshape(-1, 2).max(axis=1)
        lx = np.exp(logits - logits.max())
        probs = lx / lx.sum()
        new_state = _SessionState(
            s=s_t,
            acc_alpha=state.acc_alpha + alpha,
            alphas=state.alphas + (alpha,),
        )
        return probs, new_state


def _hyp_order(h: BeamHypothesis, horizon: int):
    # best log prob first; on ties prefer hypotheses that finished sooner,
    # then the lexicographically smallest token sequence
    finish = h.finish_step if h.finish_step is not None else horizon + 1
    return (-h.log_prob, finish, h.tokens)


def beam_search(grid: AnnotationGrid, params: dict, config: ModelConfig,
                vocab: Vocabulary, beam: int = 10, max_len: int = 40) -> BeamResult:
    """Length-capped beam decode from the start token.

    A hypothesis that emits the end token is frozen and keeps competing
    on its accumulated log probability. The best finished hypothesis
    wins; if nothing finished within max_len, the best unfinished one
    is returned. The caption text excludes start and end markers.
    """
    if beam < 1:
        raise ValueError("beam width must be at least 1")
    start, end = vocab.start_index, vocab.end_index
    session = _InferenceSession(grid, params, config)
    root = BeamHypothesis(
        tokens=(),
        log_prob=0.0,
        state=session.initial_state(),
        finished=False,
    )
    hyps = [root]
    for step in range(1, max_len + 1):
        active = [h for h in hyps if not h.finished]
        if not active:
            break
        candidates = [h for h in hyps if h.finished]
        for h in active:
            y_prev = h.tokens[-1] if h.tokens else start
            probs, new_state = session.step(y_prev, h.state)
            with np.errstate(divide="ignore"):
                logp = np.log(probs.astype(np.float64))
            for k in range(config.vocab_size):
                candidates.append(BeamHypothesis(
                    tokens=h.tokens + (k,),
                    log_prob=h.log_prob + float(logp[k]),
                    state=new_state,
                    finished=(k == end),
                    finish_step=step if k == end else None,
                ))
        candidates.sort(key=lambda h: _hyp_order(h, max_len))
        hyps = candidates[:beam]
    finished = [h for h in hyps if h.finished]
    best = min(finished or hyps, key=lambda h: _hyp_order(h, max_len))
    caption = " ".join(vocab.token(t) for t in best.tokens if t != end)
    alphas = tuple(
        np.asarray(a, dtype=np.float64).reshape(grid.H, grid.W).copy()
        for a in best.state.alphas
    )
    return BeamResult(caption=caption, log_prob=best.log_prob,
                      tokens=best.tokens, alphas=alphas)
