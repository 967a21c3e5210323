"""Transmitter and receiver codec networks.

The transmitter maps a token sequence through an embedding, a small pre-norm
transformer encoder (single-head attention, fixed depth), and a dense channel
encoder into a T x D continuous code, which a learned dense projection then
thresholds into a T x B bit frame. Exploration on the transmitter side is a
Gaussian policy around the continuous code. Each receiver owns an independent
parameter set: a dense dequantizer over the soft channel output, a transformer
decoder with cross-attention to the dequantized features, and an output
projection whose softmax defines the token-sampling policy.

Every forward function takes a name -> Tensor parameter store and builds on
the autodiff graph; pass ``autodiff.detach(params)`` for frozen passes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tensor
from .vocab import EOS, PAD, SOS, Vocabulary

CHECKPOINT_FORMAT_VERSION = 1
_NEG_INF = -1e9


@dataclass(frozen=True)
class CodecConfig:
    vocab_size: int
    max_len: int = 30          # content-token cap for sources and decodes
    embed_dim: int = 32
    code_dim: int = 32         # width of the continuous code per token
    bits_per_word: int = 16    # quantized bits per token
    dequant_dim: int = 16
    ffn_dim: int = 64
    depth: int = 1
    csi_input: bool = False    # append the fading gain to the dequantizer input

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the sentinels plus one word")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def frame_len(self) -> int:
        # room for the end marker after a maximum-length sentence
        return self.max_len + 1


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def _attn_params(rng, prefix: str, dim: int, out: dict) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.{name}"] = _dense(rng, dim, dim)


def _ln_params(prefix: str, dim: int, out: dict) -> None:
    out[f"{prefix}.g"] = np.ones(dim)
    out[f"{prefix}.b"] = np.zeros(dim)


def _ffn_params(rng, prefix: str, dim: int, hidden: int, out: dict) -> None:
    out[f"{prefix}.w1"] = _dense(rng, dim, hidden)
    out[f"{prefix}.b1"] = np.zeros(hidden)
    out[f"{prefix}.w2"] = _dense(rng, hidden, dim)
    out[f"{prefix}.b2"] = np.zeros(dim)


def init_encoder_params(cfg: CodecConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    e = cfg.embed_dim
    arrays: dict[str, Array] = {"embed": rng.normal(0.0, 1.0 / np.sqrt(e),
                                                    size=(cfg.vocab_size, e))}
    for b in range(cfg.depth):
        _ln_params(f"enc{b}.ln1", e, arrays)
        _attn_params(rng, f"enc{b}.attn", e, arrays)
        _ln_params(f"enc{b}.ln2", e, arrays)
        _ffn_params(rng, f"enc{b}.ffn", e, cfg.ffn_dim, arrays)
    _ln_params("enc_ln", e, arrays)
    arrays["chan.w"] = _dense(rng, e, cfg.code_dim)
    arrays["chan.b"] = np.zeros(cfg.code_dim)
    arrays["quant.w"] = _dense(rng, cfg.code_dim, cfg.bits_per_word)
    arrays["quant.b"] = np.zeros(cfg.bits_per_word)
    return ad.parameters(arrays)


def init_decoder_params(cfg: CodecConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    e = cfg.embed_dim
    in_width = cfg.bits_per_word + (1 if cfg.csi_input else 0)
    arrays: dict[str, Array] = {
        "dequant.w": _dense(rng, in_width, cfg.dequant_dim),
        "dequant.b": np.zeros(cfg.dequant_dim),
        "inproj.w": _dense(rng, cfg.dequant_dim, e),
        "inproj.b": np.zeros(e),
        "embed": rng.normal(0.0, 1.0 / np.sqrt(e), size=(cfg.vocab_size, e)),
    }
    for b in range(cfg.depth):
        _ln_params(f"dec{b}.ln1", e, arrays)
        _attn_params(rng, f"dec{b}.self", e, arrays)
        _ln_params(f"dec{b}.ln2", e, arrays)
        _attn_params(rng, f"dec{b}.cross", e, arrays)
        _ln_params(f"dec{b}.ln3", e, arrays)
        _ffn_params(rng, f"dec{b}.ffn", e, cfg.ffn_dim, arrays)
    _ln_params("dec_ln", e, arrays)
    arrays["out.w"] = _dense(rng, e, cfg.vocab_size)
    arrays["out.b"] = np.zeros(cfg.vocab_size)
    return ad.parameters(arrays)


# ---------------------------------------------------------------------------
# Shared network pieces
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _positions(length: int, dim: int) -> Array:
    pos = np.arange(length)[:, None]
    div = np.exp(-np.log(10000.0) * (2 * (np.arange(dim) // 2)) / dim)[None, :]
    angles = pos * div
    table = np.where(np.arange(dim)[None, :] % 2 == 0, np.sin(angles), np.cos(angles))
    table.setflags(write=False)
    return table


@lru_cache(maxsize=64)
def _causal_mask(length: int) -> Array:
    mask = np.triu(np.full((length, length), _NEG_INF), k=1)
    mask.setflags(write=False)
    return mask


def _attention(params, prefix: str, queries: Tensor, keys_values: Tensor,
               mask: Array | None = None) -> Tensor:
    dim = queries.data.shape[-1]
    q = ad.matmul(queries, params[f"{prefix}.wq"])
    k = ad.matmul(keys_values, params[f"{prefix}.wk"])
    v = ad.matmul(keys_values, params[f"{prefix}.wv"])
    scores = ad.scale(ad.matmul(q, ad.transpose_last(k)), 1.0 / np.sqrt(dim))
    if mask is not None:
        scores = ad.add(scores, ad.constant(mask))
    return ad.matmul(ad.matmul(ad.softmax(scores), v), params[f"{prefix}.wo"])


def _ln(params, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _ffn(params, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _embed_with_positions(params, ids: Array) -> Tensor:
    # embeddings are scaled up to the position-encoding amplitude, otherwise
    # the additive positions drown the token content at small widths
    length, dim = ids.shape[-1], params["embed"].data.shape[-1]
    x = ad.scale(ad.embedding_lookup(params["embed"], ids), np.sqrt(dim))
    return ad.add(x, ad.constant(_positions(length, dim)))


# ---------------------------------------------------------------------------
# Transmitter chain
# ---------------------------------------------------------------------------

def encode(theta, ids) -> Tensor:
    """Token ids (S, T) or (T,) to the continuous code (S, T, D) or (T, D).

    Deterministic given (ids, theta) and differentiable in theta."""
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    vocab_size = theta["embed"].data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token ids out of vocabulary range [0, {vocab_size})")
    x = _embed_with_positions(theta, ids)
    depth = sum(1 for k in theta if k.endswith(".ln1.g") and k.startswith("enc"))
    for b in range(depth):
        h = _ln(theta, f"enc{b}.ln1", x)
        x = ad.add(x, _attention(theta, f"enc{b}.attn", h, h))
        x = ad.add(x, _ffn(theta, f"enc{b}.ffn", _ln(theta, f"enc{b}.ln2", x)))
    x = _ln(theta, "enc_ln", x)
    code = ad.relu(ad.add(ad.matmul(x, theta["chan.w"]), theta["chan.b"]))
    return ad.slice_tensor(code, 0) if single else code


def quantize(theta, code, surrogate: bool = False) -> Tensor:
    """Threshold a learned dense projection of the code into a 0/1 bit frame.

    With ``surrogate=True`` the threshold passes gradients straight through
    (pre-training only); otherwise the frame is a graph constant, so no
    gradient ever crosses the quantizer."""
    code = code if isinstance(code, Tensor) else ad.constant(code)
    pre = ad.add(ad.matmul(code, theta["quant.w"]), theta["quant.b"])
    if surrogate:
        return ad.ste_threshold(pre)
    return ad.constant((pre.data > 0).astype(np.float64))


@dataclass
class NoisyCodeSample:
    """K exploration draws around one deterministic code."""

    noisy: Array    # (..., K, T, D)
    mean: Array     # (..., T, D)
    sigma: float


def sample_code_noise(code: Array, sigma: float, count: int,
                      rng: np.random.Generator) -> NoisyCodeSample:
    """Draw ``count`` independent elementwise-Gaussian perturbations of a code."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if count < 2:
        raise ValueError(f"need at least 2 parallel samples, got {count}")
    mean = np.asarray(code, dtype=np.float64)
    noise = rng.standard_normal((count,) + mean.shape)
    noisy = mean[None] + sigma * noise
    if mean.ndim == 3:  # batched (S, T, D): put the sample axis after the batch
        noisy = np.swapaxes(noisy, 0, 1)
    return NoisyCodeSample(noisy=noisy, mean=mean, sigma=float(sigma))


def gaussian_log_density(noisy: Array, mean: Tensor, sigma: float) -> Tensor:
    """Log density of an isotropic Gaussian draw, differentiable in the mean."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    noisy = np.asarray(noisy, dtype=np.float64)
    delta = ad.sub(ad.constant(noisy), mean)
    quad = ad.scale(ad.tensor_sum(ad.mul(delta, delta)), -0.5 / sigma ** 2)
    norm = -0.5 * noisy.size * np.log(2 * np.pi * sigma ** 2)
    return ad.add(quad, ad.constant(norm))


def gaussian_score(noisy: Array, mean: Tensor, sigma: float,
                   weights: Array | None = None) -> Tensor:
    """Scalar whose gradient in the mean parameters is the Gaussian score
    (noisy - mean)/sigma^2 contracted with the mean's Jacobian, optionally
    weighted elementwise (used to fold in advantages)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    coeff = (np.asarray(noisy, dtype=np.float64) - mean.data) / sigma ** 2
    if weights is not None:
        coeff = coeff * weights
    return ad.tensor_sum(ad.mul(ad.constant(coeff), mean))


# ---------------------------------------------------------------------------
# Receiver chain
# ---------------------------------------------------------------------------

def dequantize(phi, received, gain=None) -> Tensor:
    """Soft channel output (S, T, B) to decoder memory features (S, T, E).

    ``gain`` is the optional per-frame fading gain; it is concatenated as an
    extra input column when the codec was built with ``csi_input``."""
    received = received if isinstance(received, Tensor) else ad.constant(received)
    in_width = phi["dequant.w"].data.shape[0]
    feats = received
    if gain is not None:
        gain_col = np.broadcast_to(
            np.asarray(gain, dtype=np.float64),
            received.data.shape[:-1])[..., None]
        feats = ad.concat([received, ad.constant(gain_col)], axis=-1)
    if feats.data.shape[-1] != in_width:
        raise ValueError(
            f"dequantizer expects trailing width {in_width}, got {feats.data.shape}")
    h = ad.relu(ad.add(ad.matmul(feats, phi["dequant.w"]), phi["dequant.b"]))
    return ad.relu(ad.add(ad.matmul(h, phi["inproj.w"]), phi["inproj.b"]))


def _decoder_depth(phi) -> int:
    return sum(1 for k in phi if k.endswith(".ln1.g") and k.startswith("dec"))


def decoder_logits(phi, memory: Tensor, ids_in: Array) -> Tensor:
    """Teacher-forced logits (S, L, V) for decoder inputs (S, L)."""
    ids_in = np.asarray(ids_in, dtype=np.int64)
    x = _embed_with_positions(phi, ids_in)
    mask = _causal_mask(ids_in.shape[-1])
    for b in range(_decoder_depth(phi)):
        h = _ln(phi, f"dec{b}.ln1", x)
        x = ad.add(x, _attention(phi, f"dec{b}.self", h, h, mask=mask))
        x = ad.add(x, _attention(phi, f"dec{b}.cross", _ln(phi, f"dec{b}.ln2", x), memory))
        x = ad.add(x, _ffn(phi, f"dec{b}.ffn", _ln(phi, f"dec{b}.ln3", x)))
    x = _ln(phi, "dec_ln", x)
    return ad.add(ad.matmul(x, phi["out.w"]), phi["out.b"])


def _log_softmax_rows(logits: Array) -> Array:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class TrajectoryBundle:
    """Parallel sampled decodings of one source sentence.

    ``actions`` holds every sampled token (the end marker included when one
    was emitted); ``sentences`` are the same trajectories with the end marker
    stripped. Terminal rewards are attached by the trainer after scoring."""

    sentences: list[list[int]]
    actions: list[Array]
    step_logps: list[Array]
    rewards: Array | None = None

    @property
    def count(self) -> int:
        return len(self.sentences)

    def logprob_sums(self) -> Array:
        return np.array([lp.sum() for lp in self.step_logps])


def _autoregressive(phi, memory: Tensor, max_len: int,
                    rng: np.random.Generator | None):
    """Shared greedy/sampling decode loop over batched memory rows.

    Sampling mode when ``rng`` is given, greedy argmax otherwise (numpy argmax
    takes the first maximum, so ties break toward the lowest token id)."""
    rows = memory.data.shape[0]
    prefix = np.full((rows, 1), SOS, dtype=np.int64)
    alive = np.ones(rows, dtype=bool)
    actions: list[list[int]] = [[] for _ in range(rows)]
    logps: list[list[float]] = [[] for _ in range(rows)]
    for _ in range(max_len):
        logits = decoder_logits(phi, memory, prefix).data[:, -1, :]
        logp = _log_softmax_rows(logits)
        if rng is None:
            chosen = logits.argmax(axis=-1)
        else:
            probs = np.exp(logp)
            cum = probs.cumsum(axis=-1)
            draws = rng.random((rows, 1))
            chosen = np.minimum((draws > cum).sum(axis=-1), logits.shape[-1] - 1)
        for r in np.flatnonzero(alive):
            actions[r].append(int(chosen[r]))
            logps[r].append(logp[r, chosen[r]])
        alive &= chosen != EOS
        if not alive.any():
            break
        prefix = np.concatenate([prefix, chosen[:, None]], axis=1)
    sentences = [a[:-1] if a and a[-1] == EOS else list(a) for a in actions]
    return (sentences,
            [np.asarray(a, dtype=np.int64) for a in actions],
            [np.asarray(l, dtype=np.float64) for l in logps])


def greedy_decode(phi, memory: Tensor, max_len: int) -> list[list[int]]:
    """Argmax decoding of every memory row; returns content token lists."""
    sentences, _, _ = _autoregressive(phi, memory, max_len, rng=None)
    return sentences


def decode_greedy(phi, features: Tensor, max_len: int) -> list[int]:
    """Single-source convenience wrapper around ``greedy_decode``."""
    memory = _ensure_batched(features)
    return greedy_decode(phi, memory, max_len)[0]


def sample_trajectories(phi, memory: Tensor, count: int, max_len: int,
                        rng: np.random.Generator) -> list[TrajectoryBundle]:
    """``count`` multinomial decodings per memory row, with per-step log
    probabilities recorded for later re-scoring."""
    if count < 2:
        raise ValueError(f"need at least 2 parallel samples, got {count}")
    rows = memory.data.shape[0]
    repeated = ad.constant(np.repeat(memory.data, count, axis=0))
    sentences, actions, logps = _autoregressive(phi, repeated, max_len, rng=rng)
    bundles = []
    for s in range(rows):
        lo, hi = s * count, (s + 1) * count
        bundles.append(TrajectoryBundle(sentences[lo:hi], actions[lo:hi], logps[lo:hi]))
    return bundles


def decode_sample(phi, features: Tensor, count: int, max_len: int,
                  rng: np.random.Generator) -> TrajectoryBundle:
    """Single-source convenience wrapper around ``sample_trajectories``."""
    memory = _ensure_batched(features)
    return sample_trajectories(phi, memory, count, max_len, rng)[0]


def _ensure_batched(features: Tensor) -> Tensor:
    if features.data.ndim == 2:
        return ad.constant(features.data[None])
    return features


def trajectory_logprob_sums(phi, memory: Tensor, actions: list[Array]) -> Tensor:
    """Teacher-forced re-scoring: summed log probability of each action
    sequence under the current decoder, differentiable in phi.

    ``memory`` must have one row per action sequence."""
    rows = len(actions)
    width = max(len(a) for a in actions)
    ids_in = np.full((rows, width), PAD, dtype=np.int64)
    targets = np.zeros((rows, width), dtype=np.int64)
    mask = np.zeros((rows, width))
    for r, acts in enumerate(actions):
        n = len(acts)
        ids_in[r, 0] = SOS
        ids_in[r, 1:n] = acts[:-1]
        targets[r, :n] = acts
        mask[r, :n] = 1.0
    logp = ad.log_softmax(decoder_logits(phi, memory, ids_in))
    picked = ad.mul(ad.take_along_last(logp, targets), ad.constant(mask))
    return ad.tensor_sum(picked, axis=-1)


# ---------------------------------------------------------------------------
# Frames and teacher-forcing targets
# ---------------------------------------------------------------------------

def build_frames(contents: list[list[int]], frame_len: int) -> Array:
    """Pack content sentences into fixed frames: tokens, end marker, padding."""
    frames = np.full((len(contents), frame_len), PAD, dtype=np.int64)
    for r, sent in enumerate(contents):
        if len(sent) >= frame_len:
            raise ValueError(f"sentence of length {len(sent)} exceeds frame {frame_len}")
        frames[r, :len(sent)] = sent
        frames[r, len(sent)] = EOS
    return frames


def teacher_pairs(contents: list[list[int]], frame_len: int):
    """Decoder teacher-forcing inputs, targets and loss mask for a batch."""
    targets = build_frames(contents, frame_len)
    ids_in = np.roll(targets, 1, axis=1)
    ids_in[:, 0] = SOS
    mask = (targets != PAD).astype(np.float64)
    return ids_in, targets, mask


def cross_entropy(logits: Tensor, targets: Array, mask: Array) -> Tensor:
    """Mean negative log likelihood over unmasked target positions."""
    logp = ad.log_softmax(logits)
    picked = ad.mul(ad.take_along_last(logp, targets), ad.constant(mask))
    return ad.scale(ad.tensor_sum(picked), -1.0 / max(mask.sum(), 1.0))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: CodecConfig, vocabulary: Vocabulary,
                    theta, phis, extra: dict | None = None) -> None:
    """Versioned container: manifest plus every parameter array."""
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "codec": asdict(cfg),
        "vocab_hash": vocabulary.hash_hex(),
        "tokens": vocabulary.tokens,
        "n_receivers": len(phis),
        "extra": extra or {},
    }
    arrays = {f"theta/{k}": v.data for k, v in theta.items()}
    for n, phi in enumerate(phis):
        arrays.update({f"phi{n}/{k}": v.data for k, v in phi.items()})
    with open(path, "wb") as fh:
        with zipfile.ZipFile(fh, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
            for name, arr in sorted(arrays.items()):
                buf = io.BytesIO()
                np.save(buf, np.ascontiguousarray(arr))
                zf.writestr(f"arrays/{name}.npy", buf.getvalue())


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, vocabulary: Vocabulary | None = None):
    """Load (cfg, manifest, theta, phis); rejects a vocabulary-hash mismatch
    when a vocabulary is supplied."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint format {manifest.get('format_version')!r}")
        if vocabulary is not None and manifest["vocab_hash"] != vocabulary.hash_hex():
            raise CheckpointError(
                "checkpoint vocabulary hash does not match the provided vocabulary")
        cfg = CodecConfig(**manifest["codec"])
        stores: dict[str, dict[str, Array]] = {}
        for name in zf.namelist():
            if not name.startswith("arrays/"):
                continue
            group, _, param = name[len("arrays/"):-len(".npy")].partition("/")
            stores.setdefault(group, {})[param] = np.load(io.BytesIO(zf.read(name)))
        theta = ad.parameters(stores["theta"])
        phis = [ad.parameters(stores[f"phi{n}"])
                for n in range(manifest["n_receivers"])]
    return cfg, manifest, theta, phis
