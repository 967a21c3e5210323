import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcast import autodiff as ad
from semcast import metrics as mx
from semcast import model as md
from semcast import training as tr
from semcast.channel import ChannelConfig
from semcast.corpus import SyntheticSpec, load_corpus


def tiny_setup(n_receivers=1, seed=0, metric="bleu", **overrides):
    dataset = load_corpus(SyntheticSpec(vocab_size=30, n_sentences=60, min_len=4,
                                        max_len=6), seed=seed)
    codec = md.CodecConfig(vocab_size=len(dataset.vocabulary), max_len=6,
                           embed_dim=12, code_dim=8, bits_per_word=6,
                           dequant_dim=6, ffn_dim=16, depth=1)
    defaults = dict(batch_size=4, learning_rate=1e-3, parallel_samples=3,
                    decoder_iters_per_cycle=2, pretrain_epochs=1, total_epochs=3,
                    batches_per_epoch=4, n_receivers=n_receivers, seed=seed,
                    pretrain_optimizer="adam", pretrain_lr=1e-3, metric=metric)
    defaults.update(overrides)
    cfg = tr.TrainConfig(**defaults)
    channels = [ChannelConfig(mu_snr_db=12, delta_snr_db=1, receiver=i)
                for i in range(n_receivers)]
    return tr.Trainer(codec, cfg, dataset, channels)


class TestAdvantages:
    def test_known_values(self):
        adv = tr.leave_one_out_advantages(np.array([1.0, 0.0]))
        np.testing.assert_allclose(adv, [1.0, -1.0])

    def test_all_equal_rewards_zero_advantage(self):
        adv = tr.leave_one_out_advantages(np.full((4, 5), 0.7))
        np.testing.assert_array_equal(adv, np.zeros((4, 5)))

    def test_rejects_single_sample(self):
        with pytest.raises(ValueError):
            tr.leave_one_out_advantages(np.array([1.0]))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=16))
    def test_zero_sum_identity(self, rewards):
        record = tr.AdvantageRecord(np.array(rewards))
        assert abs(record.advantages.sum()) < 1e-9

    def test_batched_axes(self):
        rng = np.random.default_rng(0)
        rewards = rng.random((3, 4, 5))
        adv = tr.leave_one_out_advantages(rewards)
        np.testing.assert_allclose(adv.sum(axis=-1), np.zeros((3, 4)), atol=1e-9)


class TestConvergenceMonitor:
    def test_requires_window(self):
        m = tr.ConvergenceMonitor(window=10)
        m.add(0.5)
        with pytest.raises(ValueError, match="at least 10"):
            m.verdict()

    def test_constant_sequence_converged(self):
        m = tr.ConvergenceMonitor(window=10)
        for _ in range(12):
            m.add(0.8)
        assert m.verdict() == "converged"

    def test_increasing_ramp_improving(self):
        m = tr.ConvergenceMonitor(window=10)
        for v in np.linspace(0.1, 0.9, 15):
            m.add(v)
        assert m.verdict() == "improving"

    def test_large_drop_diverging(self):
        m = tr.ConvergenceMonitor(window=10)
        for _ in range(10):
            m.add(1.0)
        for _ in range(10):
            m.add(0.4)  # 60% below the running max
        assert m.verdict() == "diverging"


class TestDivergenceGuard:
    def test_triggers_after_patience(self):
        guard = tr.DivergenceGuard(fraction=0.5, patience=20)
        guard.check(1.0, 0)
        with pytest.raises(tr.TrainingDiverged) as err:
            for cycle in range(1, 40):
                guard.check(0.2, cycle)
        assert err.value.cycles_completed == 20

    def test_recovery_resets_counter(self):
        guard = tr.DivergenceGuard(fraction=0.5, patience=3)
        guard.check(1.0, 0)
        guard.check(0.1, 1)
        guard.check(0.1, 2)
        guard.check(0.9, 3)  # recovers
        guard.check(0.1, 4)
        guard.check(0.1, 5)
        guard.check(0.9, 6)


class TestConfigValidation:
    def test_bounds(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(parallel_samples=1)
        with pytest.raises(ValueError):
            tr.TrainConfig(decoder_iters_per_cycle=0)
        with pytest.raises(ValueError):
            tr.TrainConfig(pretrain_epochs=10, total_epochs=10)
        with pytest.raises(ValueError):
            tr.TrainConfig(cycle_style="other")

    def test_channel_count_must_match(self):
        with pytest.raises(ValueError, match="channel configs"):
            tiny_setup(n_receivers=2, seed=0).channels.append(None) if False else None
            dataset = load_corpus(SyntheticSpec(vocab_size=30, n_sentences=40), seed=0)
            codec = md.CodecConfig(vocab_size=len(dataset.vocabulary), max_len=8,
                                   embed_dim=8, code_dim=6, bits_per_word=5,
                                   dequant_dim=4, ffn_dim=8)
            tr.Trainer(codec, tr.TrainConfig(n_receivers=2, pretrain_epochs=0,
                                             total_epochs=1),
                       dataset, [ChannelConfig()])


class TestPretraining:
    def test_loss_decreases_by_half_on_noiseless_toy(self):
        # 50-sentence corpus, identity channel, 100 steps; window means must
        # drop by at least 50%
        dataset = load_corpus(SyntheticSpec(vocab_size=25, n_sentences=62,
                                            min_len=4, max_len=6), seed=1)
        assert len(dataset.train) == 50
        codec = md.CodecConfig(vocab_size=len(dataset.vocabulary), max_len=6,
                               embed_dim=16, code_dim=8, bits_per_word=8,
                               dequant_dim=8, ffn_dim=24, depth=1)
        cfg = tr.TrainConfig(batch_size=10, pretrain_epochs=20, total_epochs=21,
                             batches_per_epoch=5, n_receivers=1, seed=2,
                             pretrain_channel="identity", pretrain_optimizer="adam",
                             pretrain_lr=1e-2)
        trainer = tr.Trainer(codec, cfg, dataset, [ChannelConfig()])
        trainer._pretrain_opt = tr.make_optimizer("adam", 1e-2, "descent")
        losses = []
        stream = trainer._batch_stream()
        for _ in range(100):
            losses.append(trainer.pretrain_step(next(stream)))
        head = np.mean(losses[:10])
        tail = np.mean(losses[-10:])
        assert tail <= 0.5 * head

    def test_pretrain_gradients_match_finite_differences(self):
        # receiver-side coordinates only: across the hard threshold the
        # gradient is a straight-through surrogate by construction, and its
        # relaxed path is finite-difference checked in the codec tests
        trainer = tiny_setup(seed=3, pretrain_channel="identity")
        batch = trainer.dataset.train[:3]

        def closure():
            frames = md.build_frames(batch, trainer.codec_cfg.frame_len)
            code = md.encode(trainer.theta, frames)
            bits = md.quantize(trainer.theta, code, surrogate=True)
            symbols = ad.add(ad.scale(bits, 2.0), ad.constant(-1.0))
            memory = md.dequantize(trainer.shared_phi, symbols)
            ids_in, targets, mask = md.teacher_pairs(batch, trainer.codec_cfg.frame_len)
            logits = md.decoder_logits(trainer.shared_phi, memory, ids_in)
            return md.cross_entropy(logits, targets, mask)

        params = {f"rx.{k}": v for k, v in trainer.shared_phi.items()}
        err = ad.finite_difference_check(closure, params, eps=1e-5, max_coords=80)
        assert err < 1e-4

    def test_receivers_initialized_from_shared(self):
        trainer = tiny_setup(n_receivers=3, seed=4)
        trainer.init_receivers_from_pretrained()
        assert len(trainer.phis) == 3
        for phi in trainer.phis:
            for k in trainer.shared_phi:
                np.testing.assert_array_equal(phi[k].data, trainer.shared_phi[k].data)
            assert phi is not trainer.shared_phi


class TestSelfCriticalSteps:
    def test_constant_metric_leaves_decoder_unchanged(self):
        mx.register_metric("constant-half", lambda c, r: 0.5)
        trainer = tiny_setup(seed=5, metric="constant-half")
        trainer.init_receivers_from_pretrained()
        before = ad.fingerprint(trainer.phis[0])
        stats = trainer.decoder_step(trainer.dataset.train[:4], 0)
        assert ad.fingerprint(trainer.phis[0]) == before
        assert stats["loss"] == 0.0

    def test_decoder_step_freezes_transmitter_and_moves_receiver(self):
        trainer = tiny_setup(seed=6)
        trainer.init_receivers_from_pretrained()
        theta_before = ad.fingerprint(trainer.theta)
        phi_before = ad.fingerprint(trainer.phis[0])
        trainer.decoder_step(trainer.dataset.train[:4], 0)
        assert ad.fingerprint(trainer.theta) == theta_before
        assert ad.fingerprint(trainer.phis[0]) != phi_before

    def test_encoder_step_freezes_receivers_and_moves_transmitter(self):
        trainer = tiny_setup(seed=7)
        trainer.init_receivers_from_pretrained()
        theta_before = ad.fingerprint(trainer.theta)
        phi_before = ad.fingerprint(trainer.phis[0])
        trainer.encoder_step(trainer.dataset.train[:4])
        assert ad.fingerprint(trainer.phis[0]) == phi_before
        assert ad.fingerprint(trainer.theta) != theta_before

    def test_encoder_step_zero_noise_hook_is_noop(self):
        # forcing every draw onto the mean makes both the score and the
        # advantages vanish
        trainer = tiny_setup(seed=8)
        trainer.init_receivers_from_pretrained()

        class ZeroNoise:
            def __init__(self, rng):
                self.rng = rng

            def standard_normal(self, size=None):
                return np.zeros(size if size is not None else ())

            def __getattr__(self, name):
                return getattr(self.rng, name)

        trainer._rng_schedule = ZeroNoise(trainer._rng_schedule)
        before = ad.fingerprint(trainer.theta)
        trainer.encoder_step(trainer.dataset.train[:4])
        assert ad.fingerprint(trainer.theta) == before

    def test_constant_metric_leaves_encoder_unchanged(self):
        mx.register_metric("constant-half", lambda c, r: 0.5)
        trainer = tiny_setup(seed=9, metric="constant-half")
        trainer.init_receivers_from_pretrained()
        before = ad.fingerprint(trainer.theta)
        trainer.encoder_step(trainer.dataset.train[:4])
        assert ad.fingerprint(trainer.theta) == before


class TestSchedule:
    def test_update_sequence_single_receiver(self):
        # one local step per cycle, one receiver, two cycles
        trainer = tiny_setup(seed=10, decoder_iters_per_cycle=1, total_epochs=1,
                             pretrain_epochs=0, batches_per_epoch=2)
        trainer.init_receivers_from_pretrained()
        trainer.run_alternate_schedule()
        assert trainer.update_log == [("dec", 0), ("enc",), ("dec", 0), ("enc",)]

    def test_counters_after_one_epoch(self):
        trainer = tiny_setup(n_receivers=2, seed=11, decoder_iters_per_cycle=2,
                             total_epochs=1, pretrain_epochs=0, batches_per_epoch=5)
        trainer.init_receivers_from_pretrained()
        trainer.run_alternate_schedule()
        cycles = 5 // 2
        assert trainer.encoder_steps == cycles
        assert trainer.decoder_steps == [2 * cycles] * 2
        assert trainer.total_cycles() == cycles

    def test_modulo_style_consumes_one_decoder_slot(self):
        trainer = tiny_setup(seed=12, decoder_iters_per_cycle=2, total_epochs=1,
                             pretrain_epochs=0, batches_per_epoch=4,
                             cycle_style="modulo")
        trainer.init_receivers_from_pretrained()
        trainer.run_alternate_schedule()
        assert trainer.update_log == [("dec", 0), ("enc",), ("dec", 0), ("enc",)]

    def test_budget_too_small_rejected(self):
        trainer = tiny_setup(seed=13, decoder_iters_per_cycle=50, total_epochs=1,
                             pretrain_epochs=0, batches_per_epoch=4)
        trainer.init_receivers_from_pretrained()
        with pytest.raises(ValueError, match="budget"):
            trainer.run_alternate_schedule()

    def test_schedule_determinism(self):
        hashes = []
        for _ in range(2):
            trainer = tiny_setup(n_receivers=2, seed=14, total_epochs=2,
                                 pretrain_epochs=1)
            trainer.run()
            hashes.append((trainer.parameter_hashes(), tuple(trainer.update_log)))
        assert hashes[0] == hashes[1]

    def test_divergence_guard_aborts_with_partial_logs(self):
        mx.register_metric("collapsing", _CollapsingMetric())
        trainer = tiny_setup(seed=15, metric="collapsing", total_epochs=30,
                             pretrain_epochs=0, batches_per_epoch=2,
                             decoder_iters_per_cycle=1, guard_patience=5)
        trainer.init_receivers_from_pretrained()
        with pytest.raises(tr.TrainingDiverged):
            trainer.run_alternate_schedule()
        assert len(trainer.log_rows) > 0


class _CollapsingMetric:
    """High reward at first, then near zero: trips the divergence guard."""

    def __init__(self):
        self.calls = 0

    def __call__(self, candidate, reference):
        self.calls += 1
        return 1.0 if self.calls < 30 else 0.01
