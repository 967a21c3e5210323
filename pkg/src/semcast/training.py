"""Training: supervised pre-training, then alternating self-critical updates.

Pre-training jointly fits the transmitter and one shared receiver with
teacher-forced cross entropy, passing gradients through the quantizer with a
straight-through surrogate and through the channel (whose draws are constants
on the tape). Every receiver is then initialized from the shared weights and
the reinforcement phase alternates: each receiver takes a fixed number of
local policy-gradient steps against its own channel while the transmitter is
frozen, then the transmitter takes one step aggregating all receivers while
they are frozen. Both sides use leave-one-out baselines over parallel
samples, so no value network is ever fit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import channel as ch
from . import metrics as mx
from . import model as md
from .autodiff import Array
from .optim import make_optimizer

CYCLE_STYLES = ("consecutive", "modulo")


class TrainingDiverged(RuntimeError):
    """Raised by the divergence guard; training logs up to the abort survive."""

    def __init__(self, message, cycles_completed: int):
        super().__init__(message)
        self.cycles_completed = cycles_completed


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-5
    parallel_samples: int = 5              # trajectories drawn per source
    decoder_iters_per_cycle: int = 1000    # local receiver steps per update cycle
    pretrain_epochs: int = 50
    total_epochs: int = 180
    batches_per_epoch: int | None = None   # derived from the corpus when unset
    n_receivers: int = 3
    code_noise_sigma: float = 0.1
    discount: float = 1.0
    seed: int = 0
    optimizer: str = "sgd"
    pretrain_optimizer: str = "adam"
    pretrain_lr: float | None = None
    pretrain_lr_final: float | None = None  # linear per-epoch decay target
    pretrain_channel: str = "receivers"    # "receivers", "identity" or "fixed:<dB>"
    encoder_decode: str = "greedy"
    metric: str = "bleu"
    cycle_style: str = "consecutive"
    guard_fraction: float = 0.5
    guard_patience: int = 20
    monitor_window: int = 10
    monitor_slope_tol: float = 1e-3
    monitor_var_tol: float = 1e-4

    def __post_init__(self):
        if self.parallel_samples < 2:
            raise ValueError("parallel_samples must be >= 2 (leave-one-out needs peers)")
        if self.decoder_iters_per_cycle < 1:
            raise ValueError("decoder_iters_per_cycle must be >= 1")
        if not 0 <= self.pretrain_epochs < self.total_epochs:
            raise ValueError("pretrain_epochs must be < total_epochs")
        if self.batch_size < 1 or self.n_receivers < 1:
            raise ValueError("batch_size and n_receivers must be positive")
        if self.cycle_style not in CYCLE_STYLES:
            raise ValueError(f"cycle_style must be one of {CYCLE_STYLES}")


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------

def leave_one_out_advantages(rewards: Array) -> Array:
    """Per-sample reward minus the mean of its peers (last axis = samples).

    The advantages of one group always sum to zero (algebraic identity), and
    equal rewards give identically zero advantages."""
    rewards = np.asarray(rewards, dtype=np.float64)
    k = rewards.shape[-1]
    if k < 2:
        raise ValueError("need at least 2 parallel samples")
    total = rewards.sum(axis=-1, keepdims=True)
    return rewards - (total - rewards) / (k - 1)


@dataclass
class AdvantageRecord:
    rewards: Array
    advantages: Array = field(init=False)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.advantages = leave_one_out_advantages(self.rewards)


# ---------------------------------------------------------------------------
# Convergence bookkeeping
# ---------------------------------------------------------------------------

class ConvergenceMonitor:
    """Sliding-window verdicts over the per-cycle mean reward. Verdicts are
    logged only; they never silently alter training."""

    def __init__(self, window: int = 10, slope_tol: float = 1e-3, var_tol: float = 1e-4):
        if window < 2:
            raise ValueError("window must be >= 2")
        self.window = window
        self.slope_tol = slope_tol
        self.var_tol = var_tol
        self.rewards: list[float] = []

    def add(self, reward: float) -> None:
        self.rewards.append(float(reward))

    def verdict(self) -> str:
        if len(self.rewards) < self.window:
            raise ValueError(f"need at least {self.window} recorded cycles, "
                             f"have {len(self.rewards)}")
        series = np.asarray(self.rewards)
        if series[-1] < 0.5 * series.max():
            return "diverging"
        tail = series[-self.window:]
        steps = np.arange(self.window)
        slope = np.polyfit(steps, tail, 1)[0]
        if abs(slope) < self.slope_tol and tail.var() < self.var_tol:
            return "converged"
        return "improving"


class DivergenceGuard:
    """Aborts a run whose mean reward sits below a fraction of its running
    maximum for too many consecutive cycles."""

    def __init__(self, fraction: float = 0.5, patience: int = 20):
        self.fraction = fraction
        self.patience = patience
        self.running_max = -np.inf
        self.consecutive = 0

    def check(self, reward: float, cycle: int) -> None:
        self.running_max = max(self.running_max, reward)
        if reward < self.fraction * self.running_max:
            self.consecutive += 1
        else:
            self.consecutive = 0
        if self.consecutive >= self.patience:
            raise TrainingDiverged(
                f"mean reward {reward:.4f} below {self.fraction:.0%} of running "
                f"max {self.running_max:.4f} for {self.consecutive} consecutive "
                f"cycles (cycle {cycle})", cycles_completed=cycle)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

def _metric_row(decoded: list[int], reference: list[int], metric) -> dict[str, float]:
    row = {"reward": metric(decoded, reference),
           "war": mx.war(decoded, reference)}
    for n in range(1, 5):
        row[f"bleu{n}"] = mx.bleu_n(decoded, reference, n)
    return row


def _mean_rows(rows: list[dict]) -> dict[str, float]:
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


class Trainer:
    def __init__(self, codec_cfg: md.CodecConfig, cfg: TrainConfig,
                 dataset, channels: list[ch.ChannelConfig]):
        if len(channels) != cfg.n_receivers:
            raise ValueError(f"{cfg.n_receivers} receivers configured but "
                             f"{len(channels)} channel configs given")
        self.codec_cfg = codec_cfg
        self.cfg = cfg
        self.dataset = dataset
        self.channels = channels
        self.metric = mx.get_metric(cfg.metric)
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self._rng_init = np.random.default_rng(seeds[0])
        self._rng_pretrain = np.random.default_rng(seeds[1])
        self._rng_schedule = np.random.default_rng(seeds[2])
        self.theta = md.init_encoder_params(codec_cfg, self._rng_init)
        self.shared_phi = md.init_decoder_params(codec_cfg, self._rng_init)
        self.phis: list[dict] = []
        self._decoder_opts: list = []
        self._encoder_opt = make_optimizer(cfg.optimizer, cfg.learning_rate, "ascent")
        self.decoder_steps = [0] * cfg.n_receivers
        self.encoder_steps = 0
        self.update_log: list[tuple] = []
        self.log_rows: list[dict] = []
        self.monitor = ConvergenceMonitor(cfg.monitor_window, cfg.monitor_slope_tol,
                                          cfg.monitor_var_tol)
        self.encoder_rewards: list[float] = []
        self._start = time.monotonic()

    # -- plumbing -----------------------------------------------------------

    @property
    def batches_per_epoch(self) -> int:
        if self.cfg.batches_per_epoch is not None:
            return self.cfg.batches_per_epoch
        return max(1, len(self.dataset.train) // self.cfg.batch_size)

    def _batch_stream(self):
        """Endless stream of training batches, reshuffled every epoch."""
        data = self.dataset.train
        size = self.cfg.batch_size
        while True:
            order = self._rng_schedule.permutation(len(data))
            for start in range(0, self.batches_per_epoch * size, size):
                picks = [order[i % len(data)] for i in range(start, start + size)]
                yield [data[i] for i in picks]

    def _channel_draw(self, config: ch.ChannelConfig, shape, rng):
        """SNR, noise and gain draws for one on-tape transmission."""
        snr = ch.sample_snr(config, rng)
        sigma = ch.noise_sigma(snr)
        noise = sigma * rng.standard_normal(shape)
        if config.kind == "rayleigh":
            gain = rng.rayleigh(1 / np.sqrt(2), size=(shape[0],) + (1,) * (len(shape) - 1))
        else:
            gain = np.ones((shape[0],) + (1,) * (len(shape) - 1))
        return noise, gain

    def _gain_input(self, gain):
        return gain[..., 0] if self.codec_cfg.csi_input else None

    def _log(self, **row):
        row.setdefault("wall_time", time.monotonic() - self._start)
        self.log_rows.append(row)

    # -- pre-training -------------------------------------------------------

    def pretrain_step(self, contents: list[list[int]]) -> float:
        """Joint cross-entropy step on the transmitter and the shared receiver,
        straight-through gradients across the quantizer."""
        cfg = self.cfg
        frames = md.build_frames(contents, self.codec_cfg.frame_len)
        code = md.encode(self.theta, frames)
        bits = md.quantize(self.theta, code, surrogate=True)
        symbols = ad.add(ad.scale(bits, 2.0), ad.constant(-1.0))
        mode = cfg.pretrain_channel
        if mode == "identity":
            received, gain = symbols, np.ones((len(contents), 1, 1))
        else:
            config = self.channels[self._rng_pretrain.integers(len(self.channels))]
            if mode.startswith("fixed:"):
                config = replace(config, mu_snr_db=float(mode.split(":", 1)[1]),
                                 delta_snr_db=0.0)
            elif mode != "receivers":
                raise ValueError(f"unknown pretrain_channel mode {mode!r}")
            noise, gain = self._channel_draw(config, bits.data.shape, self._rng_pretrain)
            received = ad.add(ad.mul(symbols, ad.constant(gain)), ad.constant(noise))
        memory = md.dequantize(self.shared_phi, received, self._gain_input(gain))
        ids_in, targets, mask = md.teacher_pairs(contents, self.codec_cfg.frame_len)
        loss = md.cross_entropy(md.decoder_logits(self.shared_phi, memory, ids_in),
                                targets, mask)
        params = {f"tx.{k}": v for k, v in self.theta.items()}
        params.update({f"rx.{k}": v for k, v in self.shared_phi.items()})
        grads = ad.backward(loss, params)
        self._pretrain_opt.step(params, grads)
        return loss.item()

    def run_pretraining(self) -> None:
        cfg = self.cfg
        lr = cfg.pretrain_lr if cfg.pretrain_lr is not None else cfg.learning_rate
        self._pretrain_opt = make_optimizer(cfg.pretrain_optimizer, lr, "descent")
        data = self.dataset.train
        for epoch in range(cfg.pretrain_epochs):
            if cfg.pretrain_lr_final is not None and cfg.pretrain_epochs > 1:
                frac = epoch / (cfg.pretrain_epochs - 1)
                self._pretrain_opt.lr = lr + frac * (cfg.pretrain_lr_final - lr)
            order = self._rng_pretrain.permutation(len(data))
            losses = []
            for start in range(0, self.batches_per_epoch * cfg.batch_size, cfg.batch_size):
                picks = [order[i % len(data)] for i in range(start, start + cfg.batch_size)]
                losses.append(self.pretrain_step([data[i] for i in picks]))
            self._log(cycle=epoch - cfg.pretrain_epochs, phase="pretrain",
                      receiver="shared", reward=float("nan"), bleu1=float("nan"),
                      bleu2=float("nan"), bleu3=float("nan"), bleu4=float("nan"),
                      war=float("nan"), loss=float(np.mean(losses)))
        self.init_receivers_from_pretrained()

    def init_receivers_from_pretrained(self) -> None:
        """Give every receiver an independent copy of the shared weights."""
        cfg = self.cfg
        self.phis = [{k: ad.parameter(v.data.copy(), name=k)
                      for k, v in self.shared_phi.items()}
                     for _ in range(cfg.n_receivers)]
        self._decoder_opts = [make_optimizer(cfg.optimizer, cfg.learning_rate, "ascent")
                              for _ in range(cfg.n_receivers)]

    # -- self-critical steps ------------------------------------------------

    def decoder_step(self, contents: list[list[int]], receiver: int) -> dict:
        """One local policy-gradient step for a receiver, transmitter frozen.

        The frame crosses the receiver's channel once; the received signal is
        decoded into parallel sampled trajectories whose leave-one-out
        advantages weight the summed log-probability gradient."""
        cfg, codec = self.cfg, self.codec_cfg
        rng = self._rng_schedule
        k = cfg.parallel_samples
        frames = md.build_frames(contents, codec.frame_len)
        frozen_theta = ad.detach(self.theta)
        bits = md.quantize(frozen_theta, md.encode(frozen_theta, frames)).data
        received, realization = ch.transmit(self.channels[receiver], bits, rng)
        phi = self.phis[receiver]
        gain_in = self._gain_input(np.broadcast_to(
            np.asarray(realization.gain, dtype=np.float64), (bits.shape[0], 1, 1)))
        memory = md.dequantize(ad.detach(phi), received, gain_in)
        bundles = md.sample_trajectories(ad.detach(phi), memory, k,
                                         codec.max_len, rng)
        rows = []
        rewards = np.zeros((len(contents), k))
        for s, bundle in enumerate(bundles):
            stats = [_metric_row(sent, contents[s], self.metric)
                     for sent in bundle.sentences]
            rewards[s] = [st["reward"] for st in stats]
            bundle.rewards = rewards[s]
            rows.extend(stats)
        advantages = leave_one_out_advantages(rewards)
        loss_value = 0.0
        if np.abs(advantages).max() > 0:
            weights = advantages.reshape(-1) / (k * len(contents))
            live_memory = md.dequantize(phi, received, gain_in)
            mem_rep = ad.repeat_rows(live_memory, k)
            actions = [a for bundle in bundles for a in bundle.actions]
            logp_sums = md.trajectory_logprob_sums(phi, mem_rep, actions)
            objective = ad.tensor_sum(ad.mul(logp_sums, ad.constant(weights)))
            grads = ad.backward(objective, phi)
            self._decoder_opts[receiver].step(phi, grads)
            loss_value = -objective.item()
        self.decoder_steps[receiver] += 1
        self.update_log.append(("dec", receiver))
        summary = _mean_rows(rows)
        summary["loss"] = loss_value
        return summary

    def encoder_step(self, contents: list[list[int]]) -> dict:
        """One transmitter step, all receivers frozen.

        Parallel Gaussian draws around the deterministic code are quantized
        and broadcast (one independent channel realization per draw and
        receiver); each receiver decodes each draw and the advantage-weighted
        Gaussian score drives the ascent."""
        cfg, codec = self.cfg, self.codec_cfg
        rng = self._rng_schedule
        k, n_rx = cfg.parallel_samples, cfg.n_receivers
        frames = md.build_frames(contents, codec.frame_len)
        mu = md.encode(self.theta, frames)
        sample = md.sample_code_noise(mu.data, cfg.code_noise_sigma, k, rng)
        frozen_theta = ad.detach(self.theta)
        rewards = np.zeros((len(contents), n_rx, k))
        for i in range(k):
            bits = md.quantize(frozen_theta, ad.constant(sample.noisy[:, i])).data
            for n, config in enumerate(self.channels):
                received, realization = ch.transmit(config, bits, rng)
                phi = ad.detach(self.phis[n])
                gain_in = self._gain_input(np.broadcast_to(
                    np.asarray(realization.gain, dtype=np.float64),
                    (bits.shape[0], 1, 1)))
                memory = md.dequantize(phi, received, gain_in)
                if cfg.encoder_decode == "greedy":
                    decoded = md.greedy_decode(phi, memory, codec.max_len)
                else:
                    decoded = [b.sentences[0] for b in md.sample_trajectories(
                        phi, memory, 2, codec.max_len, rng)]
                rewards[:, n, i] = [self.metric(d, ref)
                                    for d, ref in zip(decoded, contents)]
        advantages = leave_one_out_advantages(rewards)       # (S, N, K)
        sample_weights = advantages.mean(axis=1)             # (S, K), the 1/N average
        objective = None
        scale = 1.0 / (k * len(contents))
        for i in range(k):
            term = md.gaussian_score(sample.noisy[:, i], mu, cfg.code_noise_sigma,
                                     weights=sample_weights[:, i, None, None] * scale)
            objective = term if objective is None else ad.add(objective, term)
        grads = ad.backward(objective, self.theta)
        self._encoder_opt.step(self.theta, grads)
        self.encoder_steps += 1
        self.update_log.append(("enc",))
        mean_reward = float(rewards.mean())
        self.encoder_rewards.append(mean_reward)
        return {"reward": mean_reward, "loss": -objective.item()}

    # -- the alternating schedule -------------------------------------------

    def total_cycles(self) -> int:
        rl_batches = (self.cfg.total_epochs - self.cfg.pretrain_epochs) * self.batches_per_epoch
        return rl_batches // self.cfg.decoder_iters_per_cycle

    def run_alternate_schedule(self, progress=None) -> None:
        """Update cycles over a continuous batch stream: every receiver takes
        its local steps, then the transmitter takes exactly one."""
        if not self.phis:
            raise RuntimeError("receivers not initialized; run pre-training first")
        cfg = self.cfg
        guard = DivergenceGuard(cfg.guard_fraction, cfg.guard_patience)
        stream = self._batch_stream()
        n_cycles = self.total_cycles()
        if n_cycles < 1:
            raise ValueError(
                f"training budget too small: {cfg.total_epochs - cfg.pretrain_epochs} "
                f"epochs x {self.batches_per_epoch} batches < one cycle of "
                f"{cfg.decoder_iters_per_cycle}")
        for cycle in range(1, n_cycles + 1):
            per_receiver: list[list[dict]] = [[] for _ in range(cfg.n_receivers)]
            decoder_batches = cfg.decoder_iters_per_cycle
            if cfg.cycle_style == "modulo":
                decoder_batches -= 1
            for _ in range(decoder_batches):
                batch = next(stream)
                for n in range(cfg.n_receivers):
                    per_receiver[n].append(self.decoder_step(batch, n))
            enc_stats = self.encoder_step(next(stream))
            cycle_rewards = []
            for n in range(cfg.n_receivers):
                if per_receiver[n]:
                    summary = _mean_rows(per_receiver[n])
                    cycle_rewards.append(summary["reward"])
                    self._log(cycle=cycle, phase="decoder", receiver=f"rx{n}", **summary)
            self._log(cycle=cycle, phase="encoder", receiver="tx",
                      reward=enc_stats["reward"], bleu1=float("nan"),
                      bleu2=float("nan"), bleu3=float("nan"), bleu4=float("nan"),
                      war=float("nan"), loss=enc_stats["loss"])
            mean_reward = float(np.mean(cycle_rewards)) if cycle_rewards else enc_stats["reward"]
            self.monitor.add(mean_reward)
            guard.check(mean_reward, cycle)
            if progress is not None:
                progress(cycle, n_cycles, mean_reward)

    def run(self, progress=None) -> None:
        self.run_pretraining()
        self.run_alternate_schedule(progress=progress)

    def parameter_hashes(self) -> dict[str, str]:
        hashes = {"theta": ad.fingerprint(self.theta)}
        for n, phi in enumerate(self.phis):
            hashes[f"phi{n}"] = ad.fingerprint(phi)
        return hashes
