"""Toy dual encoders, projector, learnable temperature, and a frozen
autoregressive caption decoder.

Both encoders are tiny single-head attention stacks over learned token and
position tables with masked mean pooling into a shared embedding space. The
decoder is a causal two-block stack conditioned on a single-position memory
vector; with one memory slot, cross-attention weights are identically one,
so conditioning reduces to adding the value-projected memory at every
position.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .optim import AdamW
from .tensor import (
    Tensor,
    add,
    backward,
    embedding_lookup,
    exp,
    log_softmax,
    masked_fill,
    matmul,
    mul,
    neg,
    no_grad,
    reshape,
    softmax,
    swap_last_axes,
    tanh,
    tensor_sum,
)
from .world import Vocabulary

__all__ = [
    "ModelConfig",
    "TextEncoder",
    "ImageEncoder",
    "Projector",
    "Temperature",
    "Decoder",
    "ModelBundle",
    "init_bundle",
    "pad_batch",
    "project",
    "decoder_log_likelihood",
    "pretrain_decoder",
    "PretrainReport",
    "save_bundle",
    "load_bundle",
]

NEG_FILL = -1e30


@dataclass
class ModelConfig:
    text_vocab: int
    visual_vocab: int
    visual_base: int
    d: int = 32          # shared embedding dim
    d_text: int = 32
    d_visual: int = 32
    d_dec: int = 48      # decoder conditioning dim, deliberately != d
    text_blocks: int = 2
    image_blocks: int = 1
    decoder_blocks: int = 2
    ff_mult: int = 2
    max_len: int = 16
    image_len: int = 6
    tau_init: float = 0.07
    tau_min: float = 0.01  # logit scale clamp range is [1, 1/tau_min]

    @staticmethod
    def from_vocab(vocab: Vocabulary, **overrides) -> "ModelConfig":
        return ModelConfig(
            text_vocab=vocab.text_size,
            visual_vocab=vocab.visual_size,
            visual_base=vocab.visual_base,
            **overrides,
        )


def _normal(rng, shape, scale):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _linear_params(rng, params, name, fan_in, fan_out, bias=True):
    params[f"{name}.w"] = _normal(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in))
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _linear(params, name, x):
    out = matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return add(out, b) if b is not None else out


_causal_masks: dict = {}


def _causal_mask(length: int) -> np.ndarray:
    mask = _causal_masks.get(length)
    if mask is None:
        mask = np.triu(np.ones((length, length), dtype=bool), k=1)
        _causal_masks[length] = mask
    return mask


def _attention(params, prefix, x, dim, key_pad=None, causal=False):
    q = _linear(params, f"{prefix}.q", x)
    k = _linear(params, f"{prefix}.k", x)
    v = _linear(params, f"{prefix}.v", x)
    scores = mul(matmul(q, swap_last_axes(k)), 1.0 / np.sqrt(dim))
    if key_pad is not None:
        scores = masked_fill(scores, key_pad[:, None, :], NEG_FILL)
    if causal:
        scores = masked_fill(scores, _causal_mask(x.shape[1]), NEG_FILL)
    attn = softmax(scores, axis=-1)
    return _linear(params, f"{prefix}.o", matmul(attn, v))


def _feed_forward(params, prefix, x):
    return _linear(params, f"{prefix}.ff2", tanh(_linear(params, f"{prefix}.ff1", x)))


def pad_batch(token_seqs, pad_id: int = 0):
    """Stack variable-length id sequences into (B, L) with PAD fill."""
    lengths = np.array([len(t) for t in token_seqs], dtype=np.int64)
    out = np.full((len(token_seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, toks in enumerate(token_seqs):
        out[i, : len(toks)] = toks
    return out, lengths


class _SequenceEncoder:
    """Shared machinery: embeddings + attention blocks + masked mean pooling."""

    def __init__(self, vocab_size, width, out_dim, n_blocks, max_len, ff_mult, rng):
        self.width = width
        self.max_len = max_len
        self.vocab_size = vocab_size
        p: dict = {}
        p["tok"] = _normal(rng, (vocab_size, width), 0.2)
        p["pos"] = _normal(rng, (max_len, width), 0.1)
        # multiplicative sign gate per position: token-in-position becomes a
        # full-strength, linearly separable component of the pooled sum; an
        # additive position table alone leaves binding as a small perturbation
        p["pos_gate"] = Tensor(
            rng.choice([-1.0, 1.0], size=(max_len, width)), requires_grad=True
        )
        for b in range(n_blocks):
            for head in ("q", "k", "v", "o"):
                _linear_params(rng, p, f"blk{b}.{head}", width, width, bias=False)
            _linear_params(rng, p, f"blk{b}.ff1", width, width * ff_mult)
            _linear_params(rng, p, f"blk{b}.ff2", width * ff_mult, width)
        # multi-head attention pooling: each head can lock onto one template
        # slot, so the pooled vector exposes per-slot readouts; a plain mean
        # would bury what distinguishes captions under the shared component
        self.pool_heads = 4
        _linear_params(rng, p, "pool_score", width, self.pool_heads)
        _linear_params(rng, p, "pool", self.pool_heads * width, out_dim)
        self.n_blocks = n_blocks
        self.params = p

    def _forward(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        n, length = ids.shape
        positions = np.arange(length)
        x = add(
            mul(
                embedding_lookup(self.params["tok"], ids),
                embedding_lookup(self.params["pos_gate"], positions),
            ),
            embedding_lookup(self.params["pos"], positions),
        )
        key_pad = np.arange(length)[None, :] >= lengths[:, None]
        pad_arg = key_pad if key_pad.any() else None
        for b in range(self.n_blocks):
            x = add(x, _attention(self.params, f"blk{b}", x, self.width, key_pad=pad_arg))
            x = add(x, _feed_forward(self.params, f"blk{b}", x))
        scores = swap_last_axes(_linear(self.params, "pool_score", x))  # (n, H, L)
        if pad_arg is not None:
            scores = masked_fill(scores, key_pad[:, None, :], NEG_FILL)
        weights = softmax(scores, axis=-1)
        pooled = reshape(matmul(weights, x), (n, self.pool_heads * self.width))
        return _linear(self.params, "pool", pooled)


class TextEncoder(_SequenceEncoder):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__(
            cfg.text_vocab, cfg.d_text, cfg.d, cfg.text_blocks,
            cfg.max_len, cfg.ff_mult, rng,
        )

    def encode_batch(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[1] > self.max_len:
            raise ValueError(f"encode_batch: length {ids.shape[1]} exceeds {self.max_len}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(
                f"encode_batch: token id outside [0, {self.vocab_size}): "
                f"min={ids.min()}, max={ids.max()}"
            )
        return self._forward(ids, np.asarray(lengths))

    def encode(self, token_ids) -> Tensor:
        ids, lengths = pad_batch([tuple(token_ids)])
        return reshape(self.encode_batch(ids, lengths), (-1,))


class ImageEncoder(_SequenceEncoder):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__(
            cfg.visual_vocab, cfg.d_visual, cfg.d, cfg.image_blocks,
            cfg.image_len, cfg.ff_mult, rng,
        )
        self.visual_base = cfg.visual_base

    def encode_batch(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids) - self.visual_base
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError("encode_batch: visual token id outside the visual vocabulary")
        lengths = np.full(ids.shape[0], ids.shape[1], dtype=np.int64)
        return self._forward(ids, lengths)

    def encode(self, rendering) -> Tensor:
        toks = rendering.token_ids if hasattr(rendering, "token_ids") else tuple(rendering)
        return reshape(self.encode_batch(np.asarray([toks])), (-1,))


class Projector:
    """Learnable linear map from encoder space to decoder conditioning space."""

    def __init__(self, cfg: ModelConfig, rng):
        self.params = {"w": _normal(rng, (cfg.d, cfg.d_dec), 1.0 / np.sqrt(cfg.d))}

    @property
    def w(self) -> Tensor:
        return self.params["w"]

    def project_batch(self, v: Tensor) -> Tensor:
        if v.shape[-1] != self.w.shape[0]:
            raise ValueError(f"project: dim {v.shape[-1]} does not match W {self.w.shape}")
        return matmul(v, self.w)


def project(projector: Projector, v: Tensor) -> Tensor:
    """h = W^T v for a single embedding vector."""
    if v.data.ndim != 1:
        raise ValueError(f"project: expected a vector, got shape {v.shape}")
    return reshape(projector.project_batch(reshape(v, (1, -1))), (-1,))


class Temperature:
    """Learnable log-scale s with tau = 1/exp(s); exp(s) clamped to [1, 1/tau_min]."""

    def __init__(self, cfg: ModelConfig):
        self.s = Tensor(np.log(1.0 / cfg.tau_init), requires_grad=True)
        self.s_min = 0.0
        self.s_max = float(np.log(1.0 / cfg.tau_min))

    @property
    def params(self):
        return {"s": self.s}

    def tau_tensor(self) -> Tensor:
        return exp(neg(self.s))

    @property
    def tau(self) -> float:
        return float(np.exp(-self.s.data))

    def clamp(self):
        self.s.data = np.clip(self.s.data, self.s_min, self.s_max)


class Decoder:
    """Causal decoder over caption tokens, conditioned on one memory vector."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.frozen = False
        p: dict = {}
        p["tok"] = _normal(rng, (cfg.text_vocab, cfg.d_dec), 0.2)
        p["pos"] = _normal(rng, (cfg.max_len, cfg.d_dec), 0.1)
        for b in range(cfg.decoder_blocks):
            for head in ("q", "k", "v", "o"):
                _linear_params(rng, p, f"blk{b}.{head}", cfg.d_dec, cfg.d_dec, bias=False)
            _linear_params(rng, p, f"blk{b}.mem", cfg.d_dec, cfg.d_dec)
            _linear_params(rng, p, f"blk{b}.ff1", cfg.d_dec, cfg.d_dec * cfg.ff_mult)
            _linear_params(rng, p, f"blk{b}.ff2", cfg.d_dec * cfg.ff_mult, cfg.d_dec)
        _linear_params(rng, p, "head", cfg.d_dec, cfg.text_vocab)
        self.params = p

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def param_hash(self) -> str:
        return checkpoint.blob_hash({k: v.data for k, v in self.params.items()})

    @staticmethod
    def _normalize_memory(memory: Tensor) -> Tensor:
        # the conditioning channel is directional: RMS-normalizing the memory
        # keeps arbitrary-scale conditioners inside the regime the decoder was
        # pre-trained on instead of saturating the blocks
        from .tensor import div, sqrt, tensor_mean, add as t_add

        rms = sqrt(t_add(tensor_mean(mul(memory, memory), axis=1, keepdims=True), 1e-12))
        return div(memory, rms)

    def token_log_probs(self, memory: Tensor, targets: np.ndarray) -> Tensor:
        """Log-probabilities (n, L-1, V) of each next token under teacher forcing."""
        memory = self._normalize_memory(memory)
        targets = np.asarray(targets)
        n, length = targets.shape
        if length < 2:
            raise ValueError("decoder: target must contain at least one predicted token")
        if length - 1 > self.cfg.max_len:
            raise ValueError(f"decoder: target length {length} exceeds {self.cfg.max_len + 1}")
        inputs = targets[:, :-1]
        x = add(
            embedding_lookup(self.params["tok"], inputs),
            embedding_lookup(self.params["pos"], np.arange(length - 1)),
        )
        for b in range(self.cfg.decoder_blocks):
            x = add(x, _attention(self.params, f"blk{b}", x, self.cfg.d_dec, causal=True))
            mem = reshape(_linear(self.params, f"blk{b}.mem", memory), (n, 1, self.cfg.d_dec))
            x = add(x, mem)  # single-slot cross-attention
            x = add(x, _feed_forward(self.params, f"blk{b}", x))
        return log_softmax(_linear(self.params, "head", x), axis=-1)

    def sequence_log_prob(self, memory: Tensor, targets: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Teacher-forced log pi(y | memory), summed over real predicted tokens."""
        targets = np.asarray(targets)
        lengths = np.asarray(lengths)
        log_probs = self.token_log_probs(memory, targets)
        n, lm1 = targets.shape[0], targets.shape[1] - 1
        predicted = targets[:, 1:]
        onehot = np.zeros((n, lm1, self.cfg.text_vocab))
        np.put_along_axis(onehot, predicted[:, :, None], 1.0, axis=2)
        tok_lp = tensor_sum(mul(log_probs, onehot), axis=2)
        real = (np.arange(lm1)[None, :] < (lengths - 1)[:, None]).astype(np.float64)
        return tensor_sum(mul(tok_lp, real), axis=1)


def decoder_log_likelihood(decoder: Decoder, h: Tensor, target_tokens) -> Tensor:
    """Scalar log pi(y | h) for one target sequence conditioned on one memory."""
    toks = tuple(target_tokens)
    if len(toks) < 2:
        raise ValueError("decoder_log_likelihood: empty target")
    mem = reshape(h, (1, -1))
    targets, lengths = pad_batch([toks])
    return reshape(decoder.sequence_log_prob(mem, targets, lengths), ())


@dataclass
class ModelBundle:
    """All trainable state plus the frozen decoder."""

    cfg: ModelConfig
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    projector: Projector
    temperature: Temperature
    decoder: Decoder
    align_temperature: Temperature | None = None

    def trainable_params(self) -> dict:
        out = {}
        for prefix, comp in (
            ("text", self.text_encoder),
            ("image", self.image_encoder),
            ("proj", self.projector),
        ):
            for k, p in comp.params.items():
                out[f"{prefix}.{k}"] = p
        out["tau.s"] = self.temperature.s
        if self.align_temperature is not None:
            out["tau_align.s"] = self.align_temperature.s
        if not self.decoder.frozen:
            for k, p in self.decoder.params.items():
                out[f"decoder.{k}"] = p
        return out

    def all_params(self) -> dict:
        out = self.trainable_params()
        if self.decoder.frozen:
            for k, p in self.decoder.params.items():
                out[f"decoder.{k}"] = p
        return out

    def param_hash(self) -> str:
        return checkpoint.blob_hash({k: p.data for k, p in self.all_params().items()})

    def clamp(self):
        self.temperature.clamp()
        if self.align_temperature is not None:
            self.align_temperature.clamp()


def init_bundle(cfg: ModelConfig, seed: int, decoder: Decoder | None = None,
                shared_tau: bool = True) -> ModelBundle:
    ss = np.random.SeedSequence((int(seed), 20))
    rng_text, rng_img, rng_proj, rng_dec = (
        np.random.default_rng(c) for c in ss.spawn(4)
    )
    bundle = ModelBundle(
        cfg=cfg,
        text_encoder=TextEncoder(cfg, rng_text),
        image_encoder=ImageEncoder(cfg, rng_img),
        projector=Projector(cfg, rng_proj),
        temperature=Temperature(cfg),
        decoder=decoder if decoder is not None else Decoder(cfg, rng_dec),
        align_temperature=None if shared_tau else Temperature(cfg),
    )
    return bundle


def _cfg_header(cfg: ModelConfig) -> dict:
    return {
        "dims": {
            "d": cfg.d, "d_text": cfg.d_text, "d_visual": cfg.d_visual,
            "d_dec": cfg.d_dec, "text_blocks": cfg.text_blocks,
            "image_blocks": cfg.image_blocks, "decoder_blocks": cfg.decoder_blocks,
            "ff_mult": cfg.ff_mult, "max_len": cfg.max_len, "image_len": cfg.image_len,
        },
        "vocab_sizes": {
            "text": cfg.text_vocab, "visual": cfg.visual_vocab,
            "visual_base": cfg.visual_base,
        },
        "tau": {"init": cfg.tau_init, "min": cfg.tau_min},
    }


def save_bundle(path, bundle: ModelBundle, meta: dict | None = None, extra_blobs: dict | None = None):
    header = _cfg_header(bundle.cfg)
    header["kind"] = "bundle"
    header["frozen_decoder"] = bundle.decoder.frozen
    header["shared_tau"] = bundle.align_temperature is None
    header["meta"] = meta or {}
    blobs = {k: p.data for k, p in bundle.all_params().items()}
    if extra_blobs:
        blobs.update(extra_blobs)
    checkpoint.write_container(path, header, blobs)


def _cfg_from_header(header: dict) -> ModelConfig:
    dims, vs = header["dims"], header["vocab_sizes"]
    return ModelConfig(
        text_vocab=vs["text"], visual_vocab=vs["visual"], visual_base=vs["visual_base"],
        d=dims["d"], d_text=dims["d_text"], d_visual=dims["d_visual"], d_dec=dims["d_dec"],
        text_blocks=dims["text_blocks"], image_blocks=dims["image_blocks"],
        decoder_blocks=dims["decoder_blocks"], ff_mult=dims["ff_mult"],
        max_len=dims["max_len"], image_len=dims["image_len"],
        tau_init=header["tau"]["init"], tau_min=header["tau"]["min"],
    )


def load_bundle(path):
    """Returns (bundle, header, extra_blobs not consumed by the bundle)."""
    header, blobs = checkpoint.read_container(path)
    if header.get("kind") != "bundle":
        raise ValueError(f"{path}: container is not a model bundle")
    cfg = _cfg_from_header(header)
    bundle = init_bundle(cfg, seed=0, shared_tau=header["shared_tau"])
    consumed = set()
    for name, p in bundle.all_params().items():
        if name not in blobs:
            raise ValueError(f"{path}: missing parameter blob {name}")
        p.data = np.array(blobs[name])
        consumed.add(name)
    if header["frozen_decoder"]:
        bundle.decoder.freeze()
    extra = {k: v for k, v in blobs.items() if k not in consumed}
    return bundle, header, extra


# --- stage 0: decoder pre-training ------------------------------------------


@dataclass
class PretrainReport:
    epochs: int
    heldout_perplexity: list
    branching_bar: float
    n_train: int
    n_heldout: int
    # fraction of held-out captions likelier under their own memory than a
    # mismatched caption's memory
    paired_win_rate: float = 0.0
    passed: bool = field(default=False)


def grammar_branching_bar(vocab: Vocabulary) -> float:
    """0.8 x geometric-mean surface choices per predicted caption position."""
    n_nouns = 2 * len(vocab.noun_ids)
    n_adjs = 2 * len(vocab.adj_ids)
    n_rels = len(vocab.rel_ids)
    slots = [1, n_adjs, n_nouns, 1, n_rels, 1, n_adjs, n_nouns, 1]
    geo = float(np.exp(np.mean(np.log(slots))))
    return 0.8 * geo


def _mean_memory(table: Tensor, pos_gate: Tensor, targets: np.ndarray,
                 lengths: np.ndarray) -> Tensor:
    # position-gated bag: a plain token mean would leave the decoder unable to
    # read word order or attribute binding out of the memory slot
    emb = mul(
        embedding_lookup(table, targets),
        embedding_lookup(pos_gate, np.arange(targets.shape[1])),
    )
    real = (np.arange(targets.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    total = tensor_sum(mul(emb, real[:, :, None]), axis=1)
    return mul(total, (1.0 / lengths.astype(np.float64))[:, None])


def pretrain_decoder(corpus, vocab: Vocabulary, cfg: ModelConfig, seed: int = 0,
                     epochs: int = 8, lr: float = 3e-3, batch_size: int = 64):
    """Stage 0: cross-caption denoising through a throwaway memory encoder.

    Each caption is decoded while conditioned on the position-gated bag of a
    sibling caption describing the same scene (groups are recovered from the
    corpus with the parser). Conditioning on the target's own bag would tie
    the decoder to one surface form and make scene-level conditioners, which
    is what fine-tuning supplies, fall outside its training distribution.
    Returns the frozen decoder and the held-out perplexity report.
    """
    corpus = [tuple(c) for c in corpus]
    if len(corpus) < 100:
        raise ValueError(
            f"pretrain_decoder: corpus of {len(corpus)} captions is too small "
            f"(need >= 100; an undertrained decoder invalidates the reconstruction signal)"
        )
    ss = np.random.SeedSequence((int(seed), 30))
    rng_init, rng_order = (np.random.default_rng(c) for c in ss.spawn(2))
    decoder = Decoder(cfg, rng_init)
    table = Tensor(rng_init.normal(0.0, 0.2, size=(cfg.text_vocab, cfg.d_dec)), requires_grad=True)
    # zero-mean sign gates: the memory becomes a position-bound superposition
    # in which each slot's token is linearly recoverable; a gate centered at 1
    # would bury the positional signal under the plain bag component
    pos_gate = Tensor(
        rng_init.choice([-1.0, 1.0], size=(cfg.max_len, cfg.d_dec)), requires_grad=True
    )

    from .world import canonical_form, parse_caption

    # every caption conditions on its scene code: the slot-gated bag of the 5
    # canonical parse tokens; all surface forms of a scene share one code, so
    # the decoder learns p(surface | scene) rather than p(surface | surface)
    codes = np.array(
        [canonical_form(parse_caption(toks, vocab), vocab) for toks in corpus],
        dtype=np.int64,
    )
    code_len = np.full(len(corpus), codes.shape[1], dtype=np.int64)

    order = rng_order.permutation(len(corpus))
    n_hold = max(20, len(corpus) // 10)
    hold_idx = np.array(order[:n_hold])
    train_idx = np.array(order[n_hold:])
    hold = [corpus[i] for i in hold_idx]
    train = [corpus[i] for i in train_idx]

    params = {f"dec.{k}": p for k, p in decoder.params.items()}
    params["memory_table"] = table
    params["memory_pos_gate"] = pos_gate
    opt = AdamW(params, lr=lr, weight_decay=0.0, clip_norm=5.0)

    hold_ids, hold_len = pad_batch(hold)

    def heldout_perplexity() -> float:
        with no_grad():
            mem = _mean_memory(table, pos_gate, codes[hold_idx], code_len[hold_idx])
            lp = decoder.sequence_log_prob(mem, hold_ids, hold_len)
        total_tokens = float(np.sum(hold_len - 1))
        return float(np.exp(-np.sum(lp.data) / total_tokens))

    history = []
    for _ in range(epochs):
        perm = rng_order.permutation(len(train))
        for start in range(0, len(train) - batch_size + 1, batch_size):
            chosen = train_idx[perm[start:start + batch_size]]
            ids, lengths = pad_batch([corpus[t] for t in chosen])
            opt.zero_grad()
            mem = _mean_memory(table, pos_gate, codes[chosen], code_len[chosen])
            lp = decoder.sequence_log_prob(mem, ids, lengths)
            loss = mul(tensor_sum(lp), -1.0 / float(np.sum(lengths - 1)))
            backward(loss)
            opt.step()
        history.append(heldout_perplexity())

    with no_grad():
        own = _mean_memory(table, pos_gate, codes[hold_idx], code_len[hold_idx])
        shift = np.roll(np.arange(len(hold)), 1)
        other = Tensor(own.data[shift])
        lp_own = decoder.sequence_log_prob(own, hold_ids, hold_len).data
        lp_other = decoder.sequence_log_prob(other, hold_ids, hold_len).data
    win_rate = float(np.mean(lp_own > lp_other))

    bar = grammar_branching_bar(vocab)
    report = PretrainReport(
        epochs=epochs, heldout_perplexity=history, branching_bar=bar,
        n_train=len(train), n_heldout=len(hold), paired_win_rate=win_rate,
        passed=history[-1] <= bar,
    )
    if not report.passed:
        raise RuntimeError(
            f"pretrain_decoder: held-out perplexity {history[-1]:.3f} above the "
            f"branching bar {bar:.3f}; decoder unusable for reconstruction"
        )
    decoder.freeze()
    return decoder, report


def save_decoder(path, decoder: Decoder, report: PretrainReport | None = None):
    header = _cfg_header(decoder.cfg)
    header["kind"] = "decoder"
    header["frozen_decoder"] = decoder.frozen
    if report is not None:
        header["pretrain"] = {
            "epochs": report.epochs,
            "heldout_perplexity": report.heldout_perplexity,
            "branching_bar": report.branching_bar,
            "n_train": report.n_train,
            "n_heldout": report.n_heldout,
        }
    checkpoint.write_container(path, header, {k: p.data for k, p in decoder.params.items()})


def load_decoder(path) -> tuple:
    header, blobs = checkpoint.read_container(path)
    if header.get("kind") != "decoder":
        raise ValueError(f"{path}: container is not a decoder checkpoint")
    cfg = _cfg_from_header(header)
    decoder = Decoder(cfg, np.random.default_rng(0))
    for name, p in decoder.params.items():
        p.data = np.array(blobs[name])
    if header.get("frozen_decoder"):
        decoder.freeze()
    return decoder, header
