"""Estimator verification on enumerable toy problems.

Two deliberately tiny setups make the policy-gradient estimators checkable
against ground truth:

* a two-step tabular-softmax token policy whose nine trajectories can be
  enumerated exactly, for the receiver-side estimator (score times
  leave-one-out advantage) and its baseline term;
* a two-parameter Gaussian code policy whose reward is a nearest-codeword
  lookup, for the transmitter-side estimator, checked against a central
  finite difference of the sampled expectation under common random numbers.

Everything is vectorized over draws so the full acceptance sample counts run
in seconds. The same leave-one-out advantage routine the trainer uses is
exercised here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array
from .training import leave_one_out_advantages


# ---------------------------------------------------------------------------
# Two-step tabular policy
# ---------------------------------------------------------------------------

@dataclass
class TwoStepPolicy:
    """Softmax policy over a tiny vocabulary: first-token logits, then one
    logit row per first token."""

    first_logits: Array                 # (V,)
    second_logits: Array                # (V, V)

    def __post_init__(self):
        self.first_logits = np.asarray(self.first_logits, dtype=np.float64)
        self.second_logits = np.asarray(self.second_logits, dtype=np.float64)
        v = self.first_logits.size
        if self.second_logits.shape != (v, v):
            raise ValueError("second_logits must be square in the vocabulary size")

    @property
    def vocab(self) -> int:
        return self.first_logits.size

    def first_probs(self) -> Array:
        e = np.exp(self.first_logits - self.first_logits.max())
        return e / e.sum()

    def second_probs(self) -> Array:
        e = np.exp(self.second_logits - self.second_logits.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def trajectory_probs(self) -> Array:
        """(V, V) matrix of joint trajectory probabilities."""
        return self.first_probs()[:, None] * self.second_probs()

    def sample(self, n_draws: int, k: int, rng: np.random.Generator):
        """(n_draws, k) first and second tokens."""
        p1 = self.first_probs()
        u = rng.random((n_draws, k))
        w1 = np.minimum((u[..., None] > p1.cumsum()).sum(axis=-1), self.vocab - 1)
        p2 = self.second_probs()[w1]
        u2 = rng.random((n_draws, k))
        w2 = np.minimum((u2[..., None] > p2.cumsum(axis=-1)).sum(axis=-1), self.vocab - 1)
        return w1, w2


def random_micro_mdp(vocab: int = 3, seed: int = 0):
    """A fixed non-degenerate policy and reward table for estimator checks."""
    rng = np.random.default_rng(seed)
    policy = TwoStepPolicy(rng.normal(scale=0.7, size=vocab),
                           rng.normal(scale=0.7, size=(vocab, vocab)))
    rewards = rng.uniform(0.05, 0.95, size=(vocab, vocab))
    return policy, rewards


def _score_components(policy: TwoStepPolicy, w1: Array, w2: Array):
    """Per-sample gradients of log pi in both logit tables.

    grad_first[d,k] = e_{w1} - p1;  grad_second[d,k] row w1 gets e_{w2} - p2[w1].
    Returned as arrays (..., V) and (..., V, V)."""
    v = policy.vocab
    p1 = policy.first_probs()
    p2 = policy.second_probs()
    eye = np.eye(v)
    g1 = eye[w1] - p1
    g2 = np.zeros(w1.shape + (v, v))
    rows = eye[w1][..., :, None]                # indicator of the visited row
    g2 += rows * (eye[w2] - p2[w1])[..., None, :]
    return g1, g2


def exact_policy_gradient(policy: TwoStepPolicy, rewards: Array):
    """Enumerated gradient of the expected reward in both logit tables."""
    v = policy.vocab
    p1 = policy.first_probs()
    p2 = policy.second_probs()
    joint = policy.trajectory_probs()
    g1 = np.zeros(v)
    g2 = np.zeros((v, v))
    eye = np.eye(v)
    for a in range(v):
        for b in range(v):
            weight = joint[a, b] * rewards[a, b]
            g1 += weight * (eye[a] - p1)
            g2[a] += weight * (eye[b] - p2[a])
    return g1, g2


@dataclass
class EstimateSummary:
    mean_first: Array
    mean_second: Array
    se_first: Array
    se_second: Array


def selfcritical_estimates(policy: TwoStepPolicy, rewards: Array, k: int,
                           n_draws: int, rng: np.random.Generator) -> EstimateSummary:
    """Monte-Carlo draws of the leave-one-out estimator: per draw, k parallel
    trajectories are scored by (sum of step score gradients) times their
    advantage, averaged over the k samples."""
    w1, w2 = policy.sample(n_draws, k, rng)
    advantages = leave_one_out_advantages(rewards[w1, w2])
    g1, g2 = _score_components(policy, w1, w2)
    est1 = (advantages[..., None] * g1).mean(axis=1)
    est2 = (advantages[..., None, None] * g2).mean(axis=1)
    return EstimateSummary(
        mean_first=est1.mean(axis=0),
        mean_second=est2.mean(axis=0),
        se_first=est1.std(axis=0, ddof=1) / np.sqrt(n_draws),
        se_second=est2.std(axis=0, ddof=1) / np.sqrt(n_draws),
    )


def baseline_term_estimates(policy: TwoStepPolicy, rewards: Array, k: int,
                            n_draws: int, rng: np.random.Generator) -> EstimateSummary:
    """The baseline contribution alone: score gradient times the peers' mean
    reward. Its expectation is zero because peers are independent draws."""
    w1, w2 = policy.sample(n_draws, k, rng)
    r = rewards[w1, w2]
    peers_mean = (r.sum(axis=1, keepdims=True) - r) / (k - 1)
    g1, g2 = _score_components(policy, w1, w2)
    est1 = (peers_mean[..., None] * g1).mean(axis=1)
    est2 = (peers_mean[..., None, None] * g2).mean(axis=1)
    return EstimateSummary(
        mean_first=est1.mean(axis=0),
        mean_second=est2.mean(axis=0),
        se_first=est1.std(axis=0, ddof=1) / np.sqrt(n_draws),
        se_second=est2.std(axis=0, ddof=1) / np.sqrt(n_draws),
    )


def estimator_variances(policy: TwoStepPolicy, rewards: Array, k: int,
                        n_estimates: int, rng: np.random.Generator):
    """Per-coordinate variance of the estimator over repeated draws, with a
    chi-square style standard error for the averaged variance."""
    w1, w2 = policy.sample(n_estimates, k, rng)
    advantages = leave_one_out_advantages(rewards[w1, w2])
    g1, g2 = _score_components(policy, w1, w2)
    est1 = (advantages[..., None] * g1).mean(axis=1)
    est2 = (advantages[..., None, None] * g2).mean(axis=1)
    coords = np.concatenate([est1.reshape(n_estimates, -1),
                             est2.reshape(n_estimates, -1)], axis=1)
    variances = coords.var(axis=0, ddof=1)
    mean_var = float(variances.mean())
    se = mean_var * np.sqrt(2.0 / (n_estimates - 1))
    return variances, mean_var, se


# ---------------------------------------------------------------------------
# Gaussian code policy toy
# ---------------------------------------------------------------------------

@dataclass
class GaussianCodeToy:
    """Two-parameter code mean, nearest-codeword decode, fixed reward table."""

    codewords: Array = field(default_factory=lambda: np.array(
        [[1.0, 0.2], [-0.6, 1.0], [-0.4, -1.0]]))
    reward_table: Array = field(default_factory=lambda: np.array([0.9, 0.45, 0.1]))
    sigma: float = 0.25

    def reward(self, codes: Array) -> Array:
        """Reward of the codeword nearest in inner product (enumerable decode)."""
        scores = np.asarray(codes) @ self.codewords.T
        return self.reward_table[scores.argmax(axis=-1)]

    def estimator(self, mean: Array, k: int, n_draws: int,
                  rng: np.random.Generator):
        """Leave-one-out Gaussian-score estimator of the expected-reward
        gradient in the code mean; returns (mean, standard error)."""
        mean = np.asarray(mean, dtype=np.float64)
        noise = rng.standard_normal((n_draws, k, mean.size))
        codes = mean + self.sigma * noise
        advantages = leave_one_out_advantages(self.reward(codes))
        scores = (codes - mean) / self.sigma ** 2
        per_draw = (advantages[..., None] * scores).mean(axis=1)
        return (per_draw.mean(axis=0),
                per_draw.std(axis=0, ddof=1) / np.sqrt(n_draws))

    def crn_finite_difference(self, mean: Array, eps: float, n_samples: int,
                              rng: np.random.Generator):
        """Central difference of the sampled expected reward, reusing the
        same noise draws on both sides of each coordinate (common random
        numbers); returns (gradient, standard error)."""
        mean = np.asarray(mean, dtype=np.float64)
        noise = self.sigma * rng.standard_normal((n_samples, mean.size))
        grad = np.zeros_like(mean)
        se = np.zeros_like(mean)
        for j in range(mean.size):
            shift = np.zeros_like(mean)
            shift[j] = eps
            up = self.reward(mean + shift + noise)
            down = self.reward(mean - shift + noise)
            diffs = (up - down) / (2 * eps)
            grad[j] = diffs.mean()
            se[j] = diffs.std(ddof=1) / np.sqrt(n_samples)
        return grad, se


# ---------------------------------------------------------------------------
# Standalone check runner (backs the CLI verb)
# ---------------------------------------------------------------------------

def run_standalone_checks(full: bool = False, seed: int = 0) -> list[dict]:
    """Run the micro-MDP and finite-difference oracles; returns one record
    per check with a pass flag and detail string."""
    from . import autodiff as ad

    draws = 100_000 if full else 20_000
    results = []

    policy, rewards = random_micro_mdp(seed=seed)
    exact1, exact2 = exact_policy_gradient(policy, rewards)
    est = selfcritical_estimates(policy, rewards, k=5, n_draws=draws,
                                 rng=np.random.default_rng(seed + 1))
    gap = np.concatenate([(est.mean_first - exact1).ravel(),
                          (est.mean_second - exact2).ravel()])
    ses = np.concatenate([est.se_first.ravel(), est.se_second.ravel()])
    worst = float(np.max(np.abs(gap) / ses))
    results.append({"name": "sampled-policy gradient vs enumeration",
                    "passed": worst <= 3.0,
                    "detail": f"worst |gap|/se = {worst:.2f} over {gap.size} coords"})

    base = baseline_term_estimates(policy, rewards, k=5, n_draws=draws,
                                   rng=np.random.default_rng(seed + 2))
    gaps = np.concatenate([base.mean_first.ravel(), base.mean_second.ravel()])
    ses = np.concatenate([base.se_first.ravel(), base.se_second.ravel()])
    worst = float(np.max(np.abs(gaps) / ses))
    results.append({"name": "leave-one-out baseline term is mean zero",
                    "passed": worst <= 3.0,
                    "detail": f"worst |mean|/se = {worst:.2f}"})

    _, var2, _ = estimator_variances(policy, rewards, 2, draws // 2,
                                     np.random.default_rng(seed + 3))
    _, var10, _ = estimator_variances(policy, rewards, 10, draws // 2,
                                      np.random.default_rng(seed + 4))
    results.append({"name": "estimator variance shrinks with more samples",
                    "passed": var10 < 0.8 * var2,
                    "detail": f"var(k=10)/var(k=2) = {var10 / var2:.3f}"})

    toy = GaussianCodeToy()
    mean = np.array([0.15, -0.1])
    mc, mc_se = toy.estimator(mean, k=5, n_draws=draws,
                              rng=np.random.default_rng(seed + 5))
    fd, fd_se = toy.crn_finite_difference(mean, eps=0.02, n_samples=draws * 5,
                                          rng=np.random.default_rng(seed + 6))
    combined = np.sqrt(mc_se ** 2 + fd_se ** 2)
    worst = float(np.max(np.abs(mc - fd) / combined))
    results.append({"name": "Gaussian-score gradient vs finite difference",
                    "passed": worst <= 3.0,
                    "detail": f"worst |gap|/se = {worst:.2f}"})

    def quadratic_closure():
        return ad.tensor_sum(ad.mul(quad_param, quad_param))

    quad_param = ad.parameter([0.7, -1.3, 0.2])
    err = ad.finite_difference_check(quadratic_closure, {"p": quad_param})
    results.append({"name": "finite-difference harness self-test",
                    "passed": err < 1e-6,
                    "detail": f"max relative error = {err:.2e}"})
    return results
