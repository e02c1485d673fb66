"""Attention LSTM caption generator.

The decoder feeds two things into the LSTM at every step: the embedding of
the previous word and the previous step's attention mixture (image crops plus
a visual sentinel), so the network is aware of the attentional context it
used last.  The sentinel competes with the image crops inside one
(C+1)-way softmax; its weight is exposed as the sentinel gate.

A plain attention path without the sentinel and without context feedback is
available via ``CaptionerConfig.attention = "att2all"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class InputError(ValueError):
    """Invalid caller-supplied value (token id, sequence, config mix)."""


ATTENTION_MODES = ("context_aware", "att2all")

# finite stand-in for -inf so softmax max-subtraction stays NaN-free
_MASK = -1e30


@dataclass(frozen=True)
class CaptionerConfig:
    vocab_size: int
    hidden_dim: int = 512
    num_crops: int = 196
    feature_dim: int = 2048
    max_len: int = 16
    bos_id: int = 0
    eos_id: int = 1
    attention: str = "context_aware"

    def __post_init__(self):
        for name in ("vocab_size", "hidden_dim", "num_crops", "feature_dim", "max_len"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.bos_id == self.eos_id:
            raise InputError("bos_id and eos_id must differ")
        if not (0 <= self.bos_id < self.vocab_size and 0 <= self.eos_id < self.vocab_size):
            raise InputError("bos_id/eos_id must be valid token ids")
        if self.attention not in ATTENTION_MODES:
            raise InputError(f"attention must be one of {ATTENTION_MODES}")


@dataclass
class TokenSequence:
    """Sentence as a token-id list; BOS is implicit at position 0 and never
    stored, EOS is stored when the sequence terminated on it."""

    tokens: list[int] = field(default_factory=list)
    terminated: bool = False

    def __len__(self):
        return len(self.tokens)


@dataclass
class DecoderState:
    h: np.ndarray        # 1 x m hidden
    c: np.ndarray        # 1 x m cell
    context: np.ndarray  # 1 x m attention mixture from the previous step


def initial_state(config: CaptionerConfig) -> DecoderState:
    """Zero state; the first-step context is defined as the zero vector."""
    m = config.hidden_dim
    return DecoderState(np.zeros((1, m)), np.zeros((1, m)), np.zeros((1, m)))


_GATES = ("i", "f", "o", "g")


def _param_shapes(config: CaptionerConfig) -> dict[str, tuple[int, int]]:
    K, m, d = config.vocab_size, config.hidden_dim, config.feature_dim
    shapes: dict[str, tuple[int, int]] = {"embed": (K, m)}
    for gate in _GATES:
        shapes[f"lstm_Wx_{gate}"] = (2 * m, m)
        shapes[f"lstm_Wh_{gate}"] = (m, m)
        shapes[f"lstm_b_{gate}"] = (1, m)
    shapes["sent_Wx"] = (2 * m, m)
    shapes["sent_Wh"] = (m, m)
    shapes["sent_b"] = (1, m)
    shapes["attn_Wv"] = (d, m)
    shapes["attn_Wa"] = (m, m)
    shapes["attn_Wh"] = (m, m)
    shapes["attn_w"] = (m, 1)
    shapes["attn_b"] = (1, m)
    shapes["out_W"] = (m, K)
    shapes["out_b"] = (1, K)
    return shapes


@dataclass
class CaptionerParams:
    config: CaptionerConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "CaptionerParams":
        return CaptionerParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def init_params(config: CaptionerConfig, seed: int) -> CaptionerParams:
    """Uniform init in [-a, a] with a = 1/sqrt(hidden_dim); seed-deterministic."""
    rng = np.random.default_rng(seed)
    a = 1.0 / np.sqrt(config.hidden_dim)
    arrays = {name: rng.uniform(-a, a, shape)
              for name, shape in _param_shapes(config).items()}
    return CaptionerParams(config, arrays)


class BoundCaptioner:
    """Captioner parameters bound to a tape, exposing differentiable steps.

    Used directly by the training losses; the module-level functions below
    wrap it for plain (non-gradient) decoding.
    """

    def __init__(self, tape: ad.Tape, params: CaptionerParams):
        self.tape = tape
        self.config = params.config
        self.p = {name: tape.tensor(arr) for name, arr in params.arrays.items()}
        mask = np.zeros(params.config.vocab_size)
        mask[params.config.bos_id] = _MASK
        self._bos_mask = tape.tensor(mask.reshape(1, -1))

    def project_feats(self, image_feats) -> ad.Tensor:
        feats = _check_feats(image_feats, self.config)
        return ad.matmul(self.tape.tensor(feats), self.p["attn_Wv"])

    def zero_state(self):
        m = self.config.hidden_dim
        z = lambda: self.tape.tensor(np.zeros((1, m)))
        return z(), z(), z()

    def embed_token(self, token: int) -> ad.Tensor:
        if not (0 <= token < self.config.vocab_size):
            raise InputError(f"token id {token} out of range")
        return ad.get_row(self.p["embed"], token)

    def embed_soft(self, soft_row: ad.Tensor) -> ad.Tensor:
        """Embedding of a relaxed token: simplex row times the embedding table."""
        return ad.matmul(soft_row, self.p["embed"])

    def step(self, h, c, ctx, x_embed, feats_proj):
        """One decoder step.

        Returns (logits 1xK, h', c', ctx', attn 1x(C+1), sentinel_gate 1x1).
        In att2all mode the context feedback is zeroed and the sentinel slot
        of the attention vector is exactly zero.
        """
        p = self.p
        context_aware = self.config.attention == "context_aware"
        if not context_aware:
            ctx = self.tape.tensor(np.zeros_like(ctx.data))
        x = ad.concat([x_embed, ctx], axis=1)  # 1 x 2m

        gates = {}
        for gate in _GATES:
            pre = ad.matmul(x, p[f"lstm_Wx_{gate}"]) + ad.matmul(h, p[f"lstm_Wh_{gate}"]) \
                + p[f"lstm_b_{gate}"]
            gates[gate] = ad.tanh(pre) if gate == "g" else ad.sigmoid(pre)
        c_new = gates["f"] * c + gates["i"] * gates["g"]
        h_new = gates["o"] * ad.tanh(c_new)

        # crop scores conditioned on the fresh hidden state
        hidden_part = ad.matmul(h_new, p["attn_Wh"])
        act_img = ad.tanh(ad.add(ad.matmul(feats_proj, p["attn_Wa"]), hidden_part) + p["attn_b"])
        e_img = ad.transpose(ad.matmul(act_img, p["attn_w"]))  # 1 x C

        if context_aware:
            sent_gate_vec = ad.sigmoid(ad.matmul(x, p["sent_Wx"]) + ad.matmul(h, p["sent_Wh"])
                                       + p["sent_b"])
            sentinel = sent_gate_vec * ad.tanh(c_new)  # 1 x m
            act_s = ad.tanh(ad.matmul(sentinel, p["attn_Wa"]) + hidden_part + p["attn_b"])
            e_s = ad.matmul(act_s, p["attn_w"])  # 1 x 1
            attn = ad.softmax(ad.concat([e_img, e_s], axis=1))  # 1 x (C+1)
            attn_img = ad.narrow(attn, 1, 0, e_img.shape[1])
            attn_sent = ad.narrow(attn, 1, e_img.shape[1], 1)
            ctx_new = ad.matmul(attn_img, feats_proj) + attn_sent * sentinel
            gate = attn_sent
        else:
            attn_img = ad.softmax(e_img)
            zero = self.tape.tensor(np.zeros((1, 1)))
            attn = ad.concat([attn_img, zero], axis=1)
            ctx_new = ad.matmul(attn_img, feats_proj)
            gate = zero

        logits = ad.matmul(h_new + ctx_new, p["out_W"]) + p["out_b"]
        return logits, h_new, c_new, ctx_new, attn, gate

    def masked_logits(self, logits: ad.Tensor) -> ad.Tensor:
        """Word scores with BOS pushed to -inf so it is never emitted."""
        return ad.add(logits, self._bos_mask)

    def word_dist(self, logits: ad.Tensor) -> ad.Tensor:
        """Output distribution; BOS is masked out and never emitted."""
        return ad.softmax(self.masked_logits(logits))

    def sequence_log_prob(self, image_feats, seq: TokenSequence) -> ad.Tensor:
        """Teacher-forced log p(sequence | image) as a differentiable scalar."""
        return self.sequence_log_prob_and_logits(image_feats, seq)[0]

    def sequence_log_prob_and_logits(self, image_feats, seq: TokenSequence):
        """As ``sequence_log_prob`` but also returns the per-step logit tensors
        (pre-mask), so callers can harvest their gradients after backward."""
        _check_seq(seq, self.config)
        feats_proj = self.project_feats(image_feats)
        h, c, ctx = self.zero_state()
        prev = self.config.bos_id
        total = self.tape.tensor(0.0)
        step_logits = []
        for tok in seq.tokens:
            logits, h, c, ctx, _, _ = self.step(h, c, ctx, self.embed_token(prev), feats_proj)
            step_logits.append(logits)
            probs = self.word_dist(logits)
            total = total + ad.log(ad.reshape(ad.narrow(probs, 1, tok, 1), ()))
            prev = tok
        return total, step_logits


def _check_feats(image_feats, config: CaptionerConfig) -> np.ndarray:
    feats = np.asarray(image_feats, dtype=np.float64)
    if feats.shape != (config.num_crops, config.feature_dim):
        raise InputError(
            f"image features must be {config.num_crops} x {config.feature_dim}, "
            f"got {feats.shape}")
    return feats


def _check_seq(seq: TokenSequence, config: CaptionerConfig):
    if not seq.tokens:
        raise InputError("sequence is empty")
    if len(seq.tokens) > config.max_len:
        raise InputError(f"sequence longer than max_len={config.max_len}")
    for tok in seq.tokens:
        if not (0 <= tok < config.vocab_size) or tok == config.bos_id:
            raise InputError(f"invalid token id {tok}")


def decode_step(params: CaptionerParams, state: DecoderState, prev_token: int,
                image_feats):
    """Single decoder step on plain arrays.

    Returns (logits (K,), new DecoderState, attention weights (C+1,) on the
    simplex including the sentinel slot, sentinel gate in [0, 1]).
    """
    tape = ad.Tape()
    bound = BoundCaptioner(tape, params)
    feats_proj = bound.project_feats(image_feats)
    h, c, ctx = (tape.tensor(state.h), tape.tensor(state.c), tape.tensor(state.context))
    logits, h2, c2, ctx2, attn, gate = bound.step(h, c, ctx,
                                                  bound.embed_token(prev_token), feats_proj)
    new_state = DecoderState(h2.data.copy(), c2.data.copy(), ctx2.data.copy())
    return logits.data.reshape(-1).copy(), new_state, attn.data.reshape(-1).copy(), gate.item()


def _run_decode(bound: BoundCaptioner, image_feats, pick):
    """Shared decode loop; ``pick(probs_row) -> token id`` chooses each word."""
    config = bound.config
    feats_proj = bound.project_feats(image_feats)
    h, c, ctx = bound.zero_state()
    prev = config.bos_id
    tokens: list[int] = []
    terminated = False
    while len(tokens) < config.max_len:
        logits, h, c, ctx, _, _ = bound.step(h, c, ctx, bound.embed_token(prev), feats_proj)
        probs = bound.word_dist(logits).data.reshape(-1)
        tok = pick(probs)
        tokens.append(tok)
        prev = tok
        if tok == config.eos_id:
            terminated = True
            break
    return TokenSequence(tokens, terminated or len(tokens) == config.max_len)


def greedy_decode(params: CaptionerParams, image_feats) -> TokenSequence:
    """Argmax decode (ties toward the lowest id); stops at EOS or max_len."""
    bound = BoundCaptioner(ad.Tape(), params)
    return _run_decode(bound, image_feats, lambda p: int(np.argmax(p)))


def sample_sentence(params: CaptionerParams, image_feats, rng: np.random.Generator):
    """Multinomial sample; returns the sequence and its total log-probability."""
    bound = BoundCaptioner(ad.Tape(), params)
    log_p = 0.0

    def pick(probs):
        nonlocal log_p
        tok = int(min(np.searchsorted(np.cumsum(probs), rng.random(), side="right"),
                      probs.size - 1))
        log_p += float(np.log(probs[tok]))
        return tok

    seq = _run_decode(bound, image_feats, pick)
    return seq, log_p


def log_prob(params: CaptionerParams, image_feats, seq: TokenSequence) -> float:
    """Total log p(seq | image) under teacher forcing."""
    tape = ad.Tape()
    return BoundCaptioner(tape, params).sequence_log_prob(image_feats, seq).item()


def ensemble_decode(params_list: list[CaptionerParams], image_feats) -> TokenSequence:
    """Average the per-step word distributions of several models, then argmax."""
    if not params_list:
        raise InputError("ensemble needs at least one model")
    config = params_list[0].config
    for p in params_list[1:]:
        if p.config != config:
            raise InputError("ensemble members must share one config")

    bounds = [BoundCaptioner(ad.Tape(), p) for p in params_list]
    projs = [b.project_feats(image_feats) for b in bounds]
    states = [b.zero_state() for b in bounds]
    prev = config.bos_id
    tokens: list[int] = []
    terminated = False
    while len(tokens) < config.max_len:
        dists = []
        for k, b in enumerate(bounds):
            h, c, ctx = states[k]
            logits, h, c, ctx, _, _ = b.step(h, c, ctx, b.embed_token(prev), projs[k])
            states[k] = (h, c, ctx)
            dists.append(b.word_dist(logits).data.reshape(-1))
        mean_dist = np.mean(dists, axis=0)
        tok = int(np.argmax(mean_dist))
        tokens.append(tok)
        prev = tok
        if tok == config.eos_id:
            terminated = True
            break
    return TokenSequence(tokens, terminated or len(tokens) == config.max_len)
