"""Adversarial optimization of the captioner against a discriminator.

The discriminator ascends a real/fake/mismatched objective; the generator
ascends the expected log discriminator score with one of three estimators:

- ``scst``: REINFORCE with the greedy decode's reward as baseline, one
  sample per image, optionally regularized by a CIDEr reward difference.
- ``gumbel_soft``: relaxed samples fed forward into both the decoder and
  the discriminator; the loss backpropagates through the relaxation.
- ``gumbel_st``: one-hot forward, identity backward through the one-hot.

All updates go through Adam; everything is driven by explicit generators,
so a run is bit-reproducible from its seed.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import metrics as met
from .captioner import (BoundCaptioner, CaptionerParams, InputError,
                        TokenSequence, greedy_decode, sample_sentence)
from .discriminator import BoundDiscriminator

logger = logging.getLogger(__name__)

ESTIMATORS = ("scst", "gumbel_soft", "gumbel_st")
REWARDS = ("logD", "logD_plus_cider", "cider")

SCORE_EPS = 1e-7  # discriminator outputs are clamped to [eps, 1-eps] before log


@dataclass
class GanConfig:
    estimator: str = "scst"
    reward: str = "logD"
    cider_weight: float = 5.0
    temperature: float = 0.5
    fm_image_weight: float = 0.0
    fm_caption_weight: float = 0.0
    g_lr: float = 1e-3
    d_lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 5
    d_pretrain_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise InputError(f"estimator must be one of {ESTIMATORS}")
        if self.reward not in REWARDS:
            raise InputError(f"reward must be one of {REWARDS}")
        if self.temperature <= 0:
            raise InputError("temperature must be positive")
        if self.cider_weight < 0 or self.fm_image_weight < 0 or self.fm_caption_weight < 0:
            raise InputError("regularizer weights must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.d_pretrain_epochs < 0:
            raise InputError("batch_size >= 1, epochs/d_pretrain_epochs >= 0")


@dataclass
class RewardRecord:
    sample_reward: float
    baseline_reward: float

    @property
    def advantage(self) -> float:
        return self.sample_reward - self.baseline_reward


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.step)


def init_adam(arrays: dict[str, np.ndarray]) -> AdamState:
    return AdamState({k: np.zeros_like(a) for k, a in arrays.items()},
                     {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """One Adam minimization step, in place; pass negated gradients to ascend."""
    state.step += 1
    b1t = 1.0 - ADAM_BETA1**state.step
    b2t = 1.0 - ADAM_BETA2**state.step
    for name, g in grads.items():
        if g.shape != arrays[name].shape:
            raise InputError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        arrays[name] -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
    return arrays, state


def _zero_grads(arrays):
    return {k: np.zeros_like(a) for k, a in arrays.items()}


def _accumulate(total, part, scale=1.0):
    for k, g in part.items():
        total[k] += scale * g
    return total


# ---------------------------------------------------------------------------
# discriminator objective
# ---------------------------------------------------------------------------


def _clamped_log_score(bound: BoundDiscriminator, feats, seq: TokenSequence) -> ad.Tensor:
    score = bound.score_sequence(feats, seq)["score"]
    raw = score.item()
    if raw <= SCORE_EPS or raw >= 1.0 - SCORE_EPS:
        logger.warning("discriminator score %.3g clamped before log", raw)
    return ad.log(ad.clip(score, SCORE_EPS, 1.0 - SCORE_EPS))


def _one_minus(t: ad.Tensor) -> ad.Tensor:
    return ad.sub(t.tape.tensor(1.0), t)


def discriminator_objective(bound: BoundDiscriminator, image_feats,
                            real: TokenSequence, fake: TokenSequence,
                            mismatched: TokenSequence) -> ad.Tensor:
    """log D(I, real) + 1/2 log(1 - D(I, fake)) + 1/2 log(1 - D(I, mismatched)).

    The trainer ascends this; scores are clamped away from {0, 1}.
    """
    def log_one_minus(seq):
        score = bound.score_sequence(image_feats, seq)["score"]
        raw = score.item()
        if raw <= SCORE_EPS or raw >= 1.0 - SCORE_EPS:
            logger.warning("discriminator score %.3g clamped before log", raw)
        return ad.log(_one_minus(ad.clip(score, SCORE_EPS, 1.0 - SCORE_EPS)))

    return _clamped_log_score(bound, image_feats, real) \
        + ad.scale(log_one_minus(fake), 0.5) \
        + ad.scale(log_one_minus(mismatched), 0.5)


def discriminator_loss(d_params, image_feats, real: TokenSequence,
                       fake: TokenSequence, mismatched: TokenSequence) -> float:
    """Plain value of the discriminator objective (no gradients)."""
    bound = BoundDiscriminator(ad.Tape(), d_params)
    return discriminator_objective(bound, image_feats, real, fake, mismatched).item()


def _clamped_score_value(d_params, feats, seq) -> float:
    s = BoundDiscriminator(ad.Tape(), d_params).score_sequence(feats, seq)["score"].item()
    return float(np.clip(s, SCORE_EPS, 1.0 - SCORE_EPS))


# ---------------------------------------------------------------------------
# SCST estimator
# ---------------------------------------------------------------------------


def sequence_reward(cfg: GanConfig, d_params, image_feats, seq: TokenSequence,
                    refs=None, idf=None) -> float:
    """Reward of a finished sequence under the configured reward mode."""
    if cfg.reward in ("logD_plus_cider", "cider") and (refs is None or idf is None):
        raise InputError(f"reward {cfg.reward!r} needs reference captions and idf")
    if cfg.reward == "cider":
        return met.cider_d(seq, refs, idf)
    r = float(np.log(_clamped_score_value(d_params, image_feats, seq)))
    if cfg.reward == "logD_plus_cider":
        r += cfg.cider_weight * met.cider_d(seq, refs, idf)
    return r


def scst_grad(g_params: CaptionerParams, d_params, image_feats,
              rng: np.random.Generator, cfg: GanConfig, refs=None, idf=None,
              want_logit_grads=False):
    """Single-sample SCST gradient of the generator objective (to ascend).

    Draws one sample, uses the greedy decode's reward as baseline, and scales
    the sample's log-probability gradient by the advantage.
    """
    sample, _ = sample_sentence(g_params, image_feats, rng)
    baseline = greedy_decode(g_params, image_feats)
    r_sample = sequence_reward(cfg, d_params, image_feats, sample, refs, idf)
    r_base = sequence_reward(cfg, d_params, image_feats, baseline, refs, idf)
    record = RewardRecord(r_sample, r_base)
    adv = record.advantage

    if adv == 0.0:
        grads = _zero_grads(g_params.arrays)
        logit_grads = [np.zeros(g_params.config.vocab_size) for _ in sample.tokens]
        return (grads, record, logit_grads) if want_logit_grads else (grads, record)

    tape = ad.Tape()
    bound = BoundCaptioner(tape, g_params)
    logp, step_logits = bound.sequence_log_prob_and_logits(image_feats, sample)
    ad.backward(tape, logp)
    grads = {name: adv * bound.p[name].grad for name in g_params.arrays}
    if not want_logit_grads:
        return grads, record
    logit_grads = [adv * t.grad.reshape(-1) for t in step_logits]
    return grads, record, logit_grads


# ---------------------------------------------------------------------------
# Gumbel estimators
# ---------------------------------------------------------------------------


def gumbel_noise(rng: np.random.Generator, size) -> np.ndarray:
    u = rng.random(size)
    return -np.log(-np.log(u + 1e-20) + 1e-20)


def gumbel_sample(logits, temperature: float, rng: np.random.Generator, mode: str):
    """Relaxed categorical sample from a logit row.

    Returns (row, argmax index): the row is on the simplex for ``soft`` and
    an exact one-hot for ``st``.
    """
    if mode not in ("soft", "st"):
        raise InputError(f"mode must be 'soft' or 'st', got {mode!r}")
    if temperature <= 0:
        raise InputError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    z = (logits + gumbel_noise(rng, logits.size)) / temperature
    z = z - z.max()
    e = np.exp(z)
    y = e / e.sum()
    hard = int(np.argmax(y))
    if mode == "soft":
        return y, hard
    onehot = np.zeros_like(y)
    onehot[hard] = 1.0
    return onehot, hard


def gumbel_unroll(tape: ad.Tape, bound_g: BoundCaptioner, image_feats,
                  rng: np.random.Generator, cfg: GanConfig):
    """Decode with relaxed samples fed back as inputs.

    Returns (soft rows on the tape, per-step logits tensors, hard token ids).
    Unrolling stops when the hard argmax is EOS or max_len is reached.
    """
    mode = "soft" if cfg.estimator == "gumbel_soft" else "st"
    config = bound_g.config
    feats_proj = bound_g.project_feats(image_feats)
    h, c, ctx = bound_g.zero_state()
    x = bound_g.embed_token(config.bos_id)
    rows, step_logits, tokens = [], [], []
    for _ in range(config.max_len):
        logits, h, c, ctx, _, _ = bound_g.step(h, c, ctx, x, feats_proj)
        step_logits.append(logits)
        noise = tape.tensor(gumbel_noise(rng, (1, config.vocab_size)))
        y = ad.softmax(ad.add(bound_g.masked_logits(logits), noise),
                       temperature=cfg.temperature)
        row = ad.st_onehot(y) if mode == "st" else y
        hard = int(np.argmax(row.data))
        rows.append(row)
        tokens.append(hard)
        x = bound_g.embed_soft(row)
        if hard == config.eos_id:
            break
    return rows, step_logits, tokens


def _sum_sq(t: ad.Tensor) -> ad.Tensor:
    return ad.reduce_sum(ad.mul(t, t))


def gumbel_grad(g_params: CaptionerParams, d_params, image_feats,
                rng: np.random.Generator, cfg: GanConfig,
                gt_seq: TokenSequence | None = None, want_logit_grads=False):
    """Gradient of log D on a relaxed sample, backpropagated into the captioner.

    With feature matching enabled the loss subtracts the squared distances
    between the discriminator embeddings of the ground-truth caption and of
    the relaxed sample; ``gt_seq`` is then required.
    """
    if cfg.estimator not in ("gumbel_soft", "gumbel_st"):
        raise InputError("gumbel_grad needs a gumbel estimator config")
    fm_on = cfg.fm_image_weight > 0 or cfg.fm_caption_weight > 0
    if fm_on and gt_seq is None:
        raise InputError("feature matching requires the ground-truth caption")

    tape = ad.Tape()
    bound_g = BoundCaptioner(tape, g_params)
    bound_d = BoundDiscriminator(tape, d_params)
    rows, step_logits, tokens = gumbel_unroll(tape, bound_g, image_feats, rng, cfg)

    out = bound_d.score_soft_rows(image_feats, rows)
    raw = out["score"].item()
    if raw <= SCORE_EPS or raw >= 1.0 - SCORE_EPS:
        logger.warning("discriminator score %.3g clamped before log", raw)
    loss = ad.log(ad.clip(out["score"], SCORE_EPS, 1.0 - SCORE_EPS))
    if fm_on:
        ref = bound_d.score_sequence(image_feats, gt_seq)
        loss = loss - ad.scale(_sum_sq(ref["e_img"] - out["e_img"]), cfg.fm_image_weight)
        loss = loss - ad.scale(_sum_sq(ref["e_cap"] - out["e_cap"]), cfg.fm_caption_weight)

    ad.backward(tape, loss)
    grads = {name: bound_g.p[name].grad.copy() for name in g_params.arrays}
    result = {
        "grads": grads,
        "loss": loss.item(),
        "tokens": tokens,
        "score": raw,
    }
    if want_logit_grads:
        result["logit_grads"] = [t.grad.reshape(-1).copy() for t in step_logits]
    return result


def generator_grad(g_params, d_params, image_feats, rng, cfg: GanConfig,
                   refs=None, idf=None, gt_seq=None):
    """Dispatch to the configured estimator; returns ascent gradients."""
    if cfg.estimator == "scst":
        grads, _ = scst_grad(g_params, d_params, image_feats, rng, cfg, refs, idf)
        return grads
    return gumbel_grad(g_params, d_params, image_feats, rng, cfg, gt_seq=gt_seq)["grads"]


# ---------------------------------------------------------------------------
# cross-entropy pretraining
# ---------------------------------------------------------------------------


def _example_feats(item):
    scene = item[0]
    return scene.features if hasattr(scene, "features") else np.asarray(scene)


def ce_pretrain(g_params: CaptionerParams, dataset, epochs: int,
                rng: np.random.Generator, lr: float = 1e-3, batch_size: int = 8):
    """Teacher-forced next-token cross entropy over all reference captions.

    Mutates ``g_params`` in place; returns (params, per-epoch mean loss in
    nats per token).
    """
    if not dataset:
        raise InputError("dataset is empty")
    pairs = [(idx, r) for idx, (_, refs) in enumerate(dataset) for r in range(len(refs))]
    opt = init_adam(g_params.arrays)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_loss, epoch_tokens = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            grads = _zero_grads(g_params.arrays)
            for j in batch:
                idx, r = pairs[j]
                feats = _example_feats(dataset[idx])
                ref = dataset[idx][1][r]
                tape = ad.Tape()
                bound = BoundCaptioner(tape, g_params)
                logp = bound.sequence_log_prob(feats, ref)
                loss = ad.scale(logp, -1.0 / len(ref.tokens))
                ad.backward(tape, loss)
                _accumulate(grads, {n: bound.p[n].grad for n in grads},
                            scale=1.0 / len(batch))
                epoch_loss += loss.item() * len(ref.tokens)
                epoch_tokens += len(ref.tokens)
            adam_step(g_params.arrays, grads, opt, lr)
        curve.append(epoch_loss / max(epoch_tokens, 1))
    return g_params, curve


# ---------------------------------------------------------------------------
# GAN training loop
# ---------------------------------------------------------------------------


def _snapshot(g_params, d_params, g_opt, d_opt, cfg_dict, rng, epoch,
              aux=None) -> datamod.Checkpoint:
    return datamod.Checkpoint(
        captioner=g_params.copy(), discriminator=d_params.copy(),
        gen_opt=g_opt.copy(), disc_opt=d_opt.copy(), config=cfg_dict,
        rng_state=rng.bit_generator.state, epoch=epoch, aux=dict(aux or {}))


def _pick_other_ref(dataset, i, rng) -> TokenSequence:
    """A real caption from a uniformly chosen different image."""
    j = int(rng.integers(len(dataset) - 1))
    if j >= i:
        j += 1
    refs = dataset[j][1]
    return refs[int(rng.integers(len(refs)))]


def _d_batch_step(g_params, d_params, d_opt, dataset, batch, rng, cfg):
    grads = _zero_grads(d_params.arrays)
    for i in batch:
        feats = _example_feats(dataset[i])
        refs = dataset[i][1]
        real = refs[int(rng.integers(len(refs)))]
        fake, _ = sample_sentence(g_params, feats, rng)
        mismatched = _pick_other_ref(dataset, i, rng)
        tape = ad.Tape()
        bound = BoundDiscriminator(tape, d_params)
        objective = discriminator_objective(bound, feats, real, fake, mismatched)
        ad.backward(tape, objective)
        _accumulate(grads, {n: bound.p[n].grad for n in grads}, scale=1.0 / len(batch))
    # ascend the objective
    adam_step(d_params.arrays, {n: -g for n, g in grads.items()}, d_opt, cfg.d_lr)


def _g_batch_step(g_params, d_params, g_opt, dataset, batch, rng, cfg, idf):
    grads = _zero_grads(g_params.arrays)
    for i in batch:
        feats = _example_feats(dataset[i])
        refs = dataset[i][1]
        gt = refs[int(rng.integers(len(refs)))]
        part = generator_grad(g_params, d_params, feats, rng, cfg,
                              refs=refs, idf=idf, gt_seq=gt)
        _accumulate(grads, part, scale=1.0 / len(batch))
    adam_step(g_params.arrays, {n: -g for n, g in grads.items()}, g_opt, cfg.g_lr)


def mean_d_scores(g_params, d_params, dataset, rng, limit=16) -> dict:
    """Mean discriminator score on real, generated and mismatched captions."""
    take = dataset[: min(limit, len(dataset))]
    real, fake, rand = [], [], []
    for i, (scene, refs) in enumerate(take):
        feats = _example_feats((scene, refs))
        real.append(_clamped_score_value(d_params, feats, refs[0]))
        sample, _ = sample_sentence(g_params, feats, rng)
        fake.append(_clamped_score_value(d_params, feats, sample))
        rand.append(_clamped_score_value(d_params, feats,
                                         _pick_other_ref(dataset, i, rng)))
    return {"d_real": float(np.mean(real)), "d_fake": float(np.mean(fake)),
            "d_random": float(np.mean(rand))}


def train_gan(g_params: CaptionerParams, d_params, dataset, cfg: GanConfig,
              idf=None, epoch_hook=None, resume: datamod.Checkpoint | None = None,
              aux=None):
    """Alternating one discriminator ascent and one generator step per batch.

    Mutates the passed parameter containers.  Returns (checkpoints, records):
    one checkpoint per completed epoch plus the initial state (which already
    includes discriminator pretraining), and one metrics record per epoch.
    With ``resume`` the loop continues exactly where that checkpoint stopped.
    """
    if not dataset:
        raise InputError("dataset is empty")
    if len(dataset) < 2:
        raise InputError("need at least 2 images for mismatched captions")
    if cfg.reward in ("logD_plus_cider", "cider") and idf is None:
        raise InputError(f"reward {cfg.reward!r} needs a fitted idf")
    cfg_dict = vars(cfg).copy()

    adversarial = cfg.reward != "cider"  # pure NLP reward has no adversary

    if resume is not None:
        g_params.arrays = {k: v.copy() for k, v in resume.captioner.arrays.items()}
        d_params.arrays = {k: v.copy() for k, v in resume.discriminator.arrays.items()}
        g_opt, d_opt = resume.gen_opt.copy(), resume.disc_opt.copy()
        rng = datamod.rng_from_state(resume.rng_state)
        start_epoch = resume.epoch
        aux = dict(resume.aux)
    else:
        g_opt, d_opt = init_adam(g_params.arrays), init_adam(d_params.arrays)
        rng = np.random.default_rng(cfg.seed)
        start_epoch = 0
        if adversarial:
            for _ in range(cfg.d_pretrain_epochs):
                order = rng.permutation(len(dataset))
                for s in range(0, len(order), cfg.batch_size):
                    _d_batch_step(g_params, d_params, d_opt, dataset,
                                  order[s : s + cfg.batch_size], rng, cfg)

    checkpoints = [_snapshot(g_params, d_params, g_opt, d_opt, cfg_dict, rng,
                             start_epoch, aux)]
    records = []
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s : s + cfg.batch_size]
            if adversarial:
                _d_batch_step(g_params, d_params, d_opt, dataset, batch, rng, cfg)
            _g_batch_step(g_params, d_params, g_opt, dataset, batch, rng, cfg, idf)
        record = {"epoch": epoch}
        record.update(mean_d_scores(g_params, d_params, dataset, rng))
        if epoch_hook is not None:
            record.update(epoch_hook(epoch, g_params, d_params))
        records.append(record)
        checkpoints.append(_snapshot(g_params, d_params, g_opt, d_opt, cfg_dict,
                                     rng, epoch, aux))
    return checkpoints, records


# ---------------------------------------------------------------------------
# gradient diagnostics
# ---------------------------------------------------------------------------


def _scst_logit_grads(g_params, d_params, feats, rng, cfg, refs, idf):
    _, _, logit_grads = scst_grad(g_params, d_params, feats, rng, cfg,
                                  refs=refs, idf=idf, want_logit_grads=True)
    return logit_grads


def grad_norm_probe(g_params, d_params, dataset, estimator: str, n_batches: int,
                    rng: np.random.Generator, cfg: GanConfig, idf=None):
    """L2 norm of the minibatch-mean logit gradient, one value per minibatch.

    Per-example step gradients are laid out on a (max_len, vocab) grid
    (zero-padded past each sequence's end), averaged over the minibatch in
    example order, and reduced to a single norm, so opposite-signed example
    gradients cancel the way they do in an actual update.

    Batch selection and estimator sampling use two separate streams derived
    from ``rng``, so different estimators probed with equal-seeded generators
    see identical minibatch sequences.  Returns (norms, batch hashes).
    """
    if n_batches < 1:
        raise InputError("n_batches must be >= 1")
    if estimator not in ESTIMATORS:
        raise InputError(f"unknown estimator {estimator!r}")
    seeds = rng.integers(0, 2**63 - 1, size=2)
    batch_rng = np.random.default_rng(int(seeds[0]))
    est_rng = np.random.default_rng(int(seeds[1]))
    probe_cfg = GanConfig(**{**vars(cfg), "estimator": estimator})
    T, K = g_params.config.max_len, g_params.config.vocab_size

    norms, hashes = [], []
    for _ in range(n_batches):
        batch = batch_rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)),
                                 replace=False)
        hashes.append(hashlib.sha256(batch.astype("<i8").tobytes()).hexdigest()[:16])
        mean_grad = np.zeros((T, K))
        for i in batch:
            feats = _example_feats(dataset[i])
            refs = dataset[i][1]
            if estimator == "scst":
                grads = _scst_logit_grads(g_params, d_params, feats, est_rng,
                                          probe_cfg, refs, idf)
            else:
                out = gumbel_grad(g_params, d_params, feats, est_rng, probe_cfg,
                                  gt_seq=refs[0], want_logit_grads=True)
                grads = out["logit_grads"]
            for t, row in enumerate(grads):
                mean_grad[t] += row / len(batch)
        norms.append(float(np.linalg.norm(mean_grad)))
    return norms, hashes
