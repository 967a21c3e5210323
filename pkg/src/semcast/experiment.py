"""Experiment harness: seeded end-to-end runs, SNR sweeps, CSV and plots.

A single JSON document configures the corpus, model dimensions, training
schedule, per-receiver channels and the evaluation grid; every default is
pre-filled so a config file only needs the overrides. Given the same config
and seed, every emitted CSV byte is reproducible except the wall-time column.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import channel as ch
from . import metrics as mx
from . import model as md
from . import training as tr
from .corpus import Dataset, SyntheticSpec, load_corpus
from .vocab import Vocabulary

REPORT_COLUMNS = ("receiver", "snr_db", "split", "reward",
                  "bleu1", "bleu2", "bleu3", "bleu4", "war")
LOG_COLUMNS = ("cycle", "phase", "receiver", "reward",
               "bleu1", "bleu2", "bleu3", "bleu4", "war", "loss", "wall_time")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    corpus: dict = field(default_factory=lambda: {
        "kind": "synthetic", "vocab_size": 120, "sentences": 1000,
        "min_len": 4, "max_len": 8})
    vocab_cap: int | None = None
    model: dict = field(default_factory=lambda: {
        "embed_dim": 128, "code_dim": 128, "bits_per_word": 30,
        "dequant_dim": 16, "ffn_dim": 256, "depth": 1, "csi_input": False})
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    channels: tuple[ch.ChannelConfig, ...] = (
        ch.ChannelConfig("awgn", 6.0, 1.0, receiver=0),
        ch.ChannelConfig("awgn", 10.0, 1.0, receiver=1),
        ch.ChannelConfig("awgn", 10.0, 2.0, receiver=2),
    )
    snr_grid_db: tuple[float, ...] = tuple(float(s) for s in range(0, 21, 2))
    eval_realizations: int = 20
    eval_splits: tuple[str, ...] = ("train", "test")

    def __post_init__(self):
        if not self.snr_grid_db:
            raise ValueError("snr_grid_db must be nonempty")
        if list(self.snr_grid_db) != sorted(self.snr_grid_db):
            raise ValueError("snr_grid_db must be sorted ascending")
        if self.eval_realizations < 1:
            raise ValueError("eval_realizations must be >= 1")
        if len(self.channels) != self.train.n_receivers:
            raise ValueError(
                f"{self.train.n_receivers} receivers configured but "
                f"{len(self.channels)} channels given")
        bad = [s for s in self.eval_splits if s not in ("train", "test")]
        if bad:
            raise ValueError(f"unknown evaluation splits {bad}")

    # -- (de)serialization --------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        defaults = cls()
        corpus = {**defaults.corpus, **raw.pop("corpus", {})}
        model = {**defaults.model, **raw.pop("model", {})}
        train_raw = raw.pop("train", {})
        channels_raw = raw.pop("channels", None)
        if channels_raw is None:
            channels = defaults.channels
        else:
            channels = tuple(
                ch.ChannelConfig(c.get("kind", "awgn"), c.get("mu_snr_db", 10.0),
                                 c.get("delta_snr_db", 1.0), receiver=i,
                                 per_symbol_fading=c.get("per_symbol_fading", False))
                for i, c in enumerate(channels_raw))
        train_raw.setdefault("n_receivers", len(channels))
        evaluation = raw.pop("evaluation", {})
        kwargs = dict(
            seed=raw.pop("seed", defaults.seed),
            corpus=corpus,
            vocab_cap=raw.pop("vocab_cap", defaults.vocab_cap),
            model=model,
            train=tr.TrainConfig(**{**{"seed": raw.get("seed", defaults.seed)},
                                    **train_raw}),
            channels=channels,
            snr_grid_db=tuple(evaluation.get("snr_grid_db", defaults.snr_grid_db)),
            eval_realizations=evaluation.get("realizations", defaults.eval_realizations),
            eval_splits=tuple(evaluation.get("splits", defaults.eval_splits)),
        )
        if raw:
            raise ValueError(f"unknown config keys: {sorted(raw)}")
        cfg = cls(**kwargs)
        if cfg.train.seed != cfg.seed:
            cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "corpus": dict(self.corpus),
            "vocab_cap": self.vocab_cap,
            "model": dict(self.model),
            "train": asdict(self.train),
            "channels": [asdict(c) for c in self.channels],
            "evaluation": {"snr_grid_db": list(self.snr_grid_db),
                           "realizations": self.eval_realizations,
                           "splits": list(self.eval_splits)},
            "version": __version__,
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_overrides(self, seed=None) -> "ExperimentConfig":
        if seed is None:
            return self
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    # -- derived objects ----------------------------------------------------

    def load_dataset(self) -> Dataset:
        spec = dict(self.corpus)
        kind = spec.pop("kind", "synthetic")
        if kind == "synthetic":
            source = SyntheticSpec(
                vocab_size=spec.get("vocab_size", 120),
                n_sentences=spec.get("sentences", 1000),
                min_len=spec.get("min_len", 4),
                max_len=spec.get("max_len", 8))
            min_len, max_len = source.min_len, source.max_len
        elif kind == "file":
            source = spec["path"]
            min_len, max_len = spec.get("min_len", 4), spec.get("max_len", 30)
        else:
            raise ValueError(f"unknown corpus kind {kind!r}")
        return load_corpus(source, vocab_cap=self.vocab_cap, min_len=min_len,
                           max_len=max_len, seed=self.seed)

    def codec_config(self, vocabulary: Vocabulary) -> md.CodecConfig:
        max_len = self.corpus.get("max_len", 30)
        return md.CodecConfig(vocab_size=len(vocabulary), max_len=max_len,
                              **self.model)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    rows: list[dict]
    seed: int
    config_hash: str
    vocab_hash: str
    version: str = __version__

    def validate(self, receivers: int, grid, splits) -> None:
        """Every (receiver, snr, split) cell present, metrics inside [0, 1]."""
        want = {(f"rx{n}", float(s), sp)
                for n in range(receivers) for s in grid for sp in splits}
        have = {(r["receiver"], float(r["snr_db"]), r["split"]) for r in self.rows}
        missing = want - have
        if missing:
            raise ValueError(f"evaluation grid incomplete, missing {sorted(missing)[:4]}")
        for row in self.rows:
            for key in ("reward", "bleu1", "bleu2", "bleu3", "bleu4", "war"):
                if not 0.0 <= row[key] <= 1.0:
                    raise ValueError(f"metric {key} out of range in {row}")

    def cell(self, receiver: str, snr_db: float, split: str) -> dict:
        for row in self.rows:
            if (row["receiver"] == receiver and row["snr_db"] == snr_db
                    and row["split"] == split):
                return row
        raise KeyError((receiver, snr_db, split))


def evaluate_receivers(codec_cfg, theta, phis, channels, dataset,
                       snr_grid, realizations, seed, splits=("train", "test"),
                       metric=mx.combined_bleu) -> list[dict]:
    """Greedy decoding across the SNR grid, averaged over independent channel
    realizations per sentence. Exploration noise stays off; the sweep pins
    each grid point's SNR (the per-receiver spread models training only)."""
    frozen_theta = ad.detach(theta)
    rows = []
    for split_idx, split in enumerate(splits):
        sentences = getattr(dataset, split)
        frames = md.build_frames(sentences, codec_cfg.frame_len)
        bits = md.quantize(frozen_theta, md.encode(frozen_theta, frames)).data
        for n, config in enumerate(channels):
            phi = ad.detach(phis[n])
            rng = np.random.default_rng(np.random.SeedSequence((seed, n, split_idx)))
            for snr in snr_grid:
                stats = []
                for _ in range(realizations):
                    received, realization = ch.transmit(config, bits, rng, snr_db=snr)
                    gain_in = None
                    if codec_cfg.csi_input:
                        gain_in = np.broadcast_to(
                            np.asarray(realization.gain, dtype=np.float64),
                            (bits.shape[0], 1, 1))[..., 0]
                    memory = md.dequantize(phi, received, gain_in)
                    decoded = md.greedy_decode(phi, memory, codec_cfg.max_len)
                    stats.extend(tr._metric_row(d, ref, metric)
                                 for d, ref in zip(decoded, sentences))
                summary = tr._mean_rows(stats)
                rows.append({"receiver": f"rx{n}", "snr_db": float(snr),
                             "split": split, **summary})
    return rows


def exact_match_rate(codec_cfg, theta, phi, sentences) -> float:
    """Noiseless round trip: encode, quantize, identity channel, decode."""
    frozen_theta, frozen_phi = ad.detach(theta), ad.detach(phi)
    frames = md.build_frames(sentences, codec_cfg.frame_len)
    bits = md.quantize(frozen_theta, md.encode(frozen_theta, frames)).data
    symbols = ch.modulate(bits)
    gain_in = None
    if codec_cfg.csi_input:
        gain_in = np.ones((bits.shape[0], 1))
    memory = md.dequantize(frozen_phi, symbols, gain_in)
    decoded = md.greedy_decode(frozen_phi, memory, codec_cfg.max_len)
    return float(np.mean([d == ref for d, ref in zip(decoded, sentences)]))


# ---------------------------------------------------------------------------
# File emission
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def write_plots(out_dir: Path, report_rows, log_rows) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = out_dir / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    receivers = sorted({r["receiver"] for r in report_rows})
    for metric in ("reward", "bleu1", "bleu4", "war"):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for receiver in receivers:
            pts = [(r["snr_db"], r[metric]) for r in report_rows
                   if r["receiver"] == receiver and r["split"] == "train"]
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    marker="o", ms=3, label=receiver)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(metric)
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        target = plot_dir / f"{metric}_vs_snr.svg"
        fig.savefig(target)
        plt.close(fig)
        written.append(target)
    cycles = sorted({row["cycle"] for row in log_rows if row["phase"] == "decoder"})
    if cycles:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for receiver in sorted({r["receiver"] for r in log_rows
                                if r["phase"] == "decoder"}):
            series = [(r["cycle"], r["reward"]) for r in log_rows
                      if r["phase"] == "decoder" and r["receiver"] == receiver]
            ax.plot([p[0] for p in series], [p[1] for p in series], label=receiver)
        enc = [(r["cycle"], r["reward"]) for r in log_rows if r["phase"] == "encoder"]
        if enc:
            ax.plot([p[0] for p in enc], [p[1] for p in enc],
                    label="tx", linestyle="--")
        ax.set_xlabel("update cycle")
        ax.set_ylabel("mean reward")
        ax.legend(fontsize=7)
        fig.tight_layout()
        target = plot_dir / "training_reward.svg"
        fig.savefig(target)
        plt.close(fig)
        written.append(target)
    return written


# ---------------------------------------------------------------------------
# Top-level runs
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out_dir, progress=None,
                   pretrained_checkpoint=None):
    """Full pipeline: corpus, pre-training (or a reused pre-trained
    checkpoint), alternating schedule, checkpoint, grid evaluation, reports.

    On a divergence abort the partial training log is still written before
    the error propagates."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = cfg.load_dataset()
    codec_cfg = cfg.codec_config(dataset.vocabulary)
    trainer = tr.Trainer(codec_cfg, cfg.train, dataset, list(cfg.channels))
    (out_dir / "config_resolved.txt").write_text(
        json.dumps({**cfg.to_dict(), "config_hash": cfg.config_hash(),
                    "vocab_hash": dataset.vocabulary.hash_hex()},
                   indent=2, sort_keys=True) + "\n")
    try:
        if pretrained_checkpoint is not None:
            loaded_cfg, _, theta, phis = md.load_checkpoint(
                pretrained_checkpoint, dataset.vocabulary)
            if loaded_cfg != codec_cfg:
                raise md.CheckpointError(
                    "pre-trained checkpoint was built for a different codec")
            trainer.theta = theta
            trainer.shared_phi = phis[0]
            trainer.init_receivers_from_pretrained()
            trainer.run_alternate_schedule(progress=progress)
        else:
            trainer.run(progress=progress)
    finally:
        write_csv(out_dir / "training_log.csv", LOG_COLUMNS, trainer.log_rows)
    md.save_checkpoint(out_dir / "checkpoint.bin", codec_cfg, dataset.vocabulary,
                       trainer.theta, trainer.phis,
                       extra={"config_hash": cfg.config_hash()})
    rows = evaluate_receivers(codec_cfg, trainer.theta, trainer.phis,
                              list(cfg.channels), dataset, cfg.snr_grid_db,
                              cfg.eval_realizations, cfg.seed, cfg.eval_splits,
                              metric=mx.get_metric(cfg.train.metric))
    report = EvaluationReport(rows, cfg.seed, cfg.config_hash(),
                              dataset.vocabulary.hash_hex())
    report.validate(cfg.train.n_receivers, cfg.snr_grid_db, cfg.eval_splits)
    write_csv(out_dir / "report.csv", REPORT_COLUMNS, rows)
    write_plots(out_dir, rows, trainer.log_rows)
    return report, trainer


def save_pretrained(cfg: ExperimentConfig, out_path) -> None:
    """Run only the supervised stage and store it for reuse across variants."""
    dataset = cfg.load_dataset()
    codec_cfg = cfg.codec_config(dataset.vocabulary)
    trainer = tr.Trainer(codec_cfg, cfg.train, dataset, list(cfg.channels))
    trainer.run_pretraining()
    md.save_checkpoint(out_path, codec_cfg, dataset.vocabulary, trainer.theta,
                       [trainer.shared_phi], extra={"stage": "pretrained"})


def sweep_snr(cfg: ExperimentConfig, checkpoint_path, out_dir,
              snr_grid=None):
    """Re-evaluate a stored checkpoint over an SNR grid; rejects a checkpoint
    whose vocabulary does not match the config's corpus."""
    grid = tuple(float(s) for s in (snr_grid if snr_grid is not None
                                    else cfg.snr_grid_db))
    if not grid:
        raise ValueError("SNR grid must be nonempty")
    if list(grid) != sorted(grid):
        raise ValueError("SNR grid must be sorted ascending")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = cfg.load_dataset()
    codec_cfg, manifest, theta, phis = md.load_checkpoint(
        checkpoint_path, dataset.vocabulary)
    rows = evaluate_receivers(codec_cfg, theta, phis, list(cfg.channels),
                              dataset, grid, cfg.eval_realizations, cfg.seed,
                              cfg.eval_splits,
                              metric=mx.get_metric(cfg.train.metric))
    report = EvaluationReport(rows, cfg.seed, cfg.config_hash(),
                              manifest["vocab_hash"])
    report.validate(len(phis), grid, cfg.eval_splits)
    write_csv(out_dir / "report.csv", REPORT_COLUMNS, rows)
    write_plots(out_dir, rows, [])
    return report


def _cycle_channels(base: tuple[ch.ChannelConfig, ...], count: int):
    return tuple(replace(base[i % len(base)], receiver=i) for i in range(count))


def compare_rx_counts(cfg: ExperimentConfig, rx_counts, out_dir):
    """Train one experiment per receiver count (same corpus and seed) and
    summarize SNR-averaged metrics per count."""
    if not rx_counts or any(c < 1 for c in rx_counts):
        raise ValueError("receiver counts must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for count in rx_counts:
        variant = replace(cfg, channels=_cycle_channels(cfg.channels, count),
                          train=replace(cfg.train, n_receivers=count))
        report, _ = run_experiment(variant, out_dir / f"rx{count}")
        test_rows = [r for r in report.rows if r["split"] == "test"] or report.rows
        entry = {"n_receivers": count}
        for key in ("bleu1", "bleu2", "bleu3", "bleu4", "war"):
            entry[key] = float(np.mean([r[key] for r in test_rows]))
        summary.append(entry)
    write_csv(out_dir / "rx_scaling.csv",
              ("n_receivers", "bleu1", "bleu2", "bleu3", "bleu4", "war"), summary)
    return summary
