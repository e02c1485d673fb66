"""Enumeration oracles for the policy-gradient estimator tests.

These walk the complete sampling tree of a tiny captioner, so expectations
and variances over the sequence distribution are exact.
"""

import numpy as np

from seqgan import autodiff as ad
from seqgan.captioner import BoundCaptioner, TokenSequence, log_prob


def enumerate_sequences(config):
    """Every sampling outcome: sequences ending at EOS or at max_len."""
    seqs = []

    def rec(prefix):
        for tok in range(config.vocab_size):
            if tok == config.bos_id:
                continue
            cur = prefix + [tok]
            if tok == config.eos_id or len(cur) == config.max_len:
                seqs.append(TokenSequence(cur, True))
            else:
                rec(cur)

    rec([])
    return seqs


def sequence_probabilities(g_params, feats, seqs):
    return np.array([np.exp(log_prob(g_params, feats, s)) for s in seqs])


def flat_grads(grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].reshape(-1) for k in sorted(grads)])


def autodiff_expected_reward_grad(g_params, feats, seqs, rewards, baseline):
    """Gradient of sum_s p(s) * (r_s - b), differentiated through p on one tape."""
    tape = ad.Tape()
    bound = BoundCaptioner(tape, g_params)
    acc = tape.tensor(0.0)
    for seq, r in zip(seqs, rewards):
        p = ad.exp(bound.sequence_log_prob(feats, seq))
        acc = acc + ad.scale(p, r - baseline)
    ad.backward(tape, acc)
    return {name: bound.p[name].grad.copy() for name in g_params.arrays}


def per_sequence_score_grads(g_params, feats, seqs):
    """(probabilities, flat grad of log p per sequence)."""
    probs, grads = [], []
    for seq in seqs:
        tape = ad.Tape()
        bound = BoundCaptioner(tape, g_params)
        lp = bound.sequence_log_prob(feats, seq)
        ad.backward(tape, lp)
        probs.append(float(np.exp(lp.item())))
        grads.append(flat_grads({n: bound.p[n].grad for n in g_params.arrays}))
    return np.array(probs), np.vstack(grads)


def expected_policy_gradient(probs, score_grads, rewards, baseline):
    """Exact expectation of (r - b) * grad log p over the sequence law."""
    w = probs * (np.asarray(rewards) - baseline)
    return w @ score_grads


def policy_gradient_variance(probs, score_grads, rewards, baseline):
    """Exact per-component variance of the (r - b)-weighted score estimator."""
    g = (np.asarray(rewards) - baseline)[:, None] * score_grads
    mean = probs @ g
    second = probs @ (g * g)
    return second - mean**2
