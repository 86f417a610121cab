"""The four system variants: sot, sot-h, encsep, and gencsep.

All share a bidirectional LSTM encoder and an attention decoder (single
unidirectional LSTM layer, one cross-attention head, token embeddings).
sot trains with serialized cross entropy only; sot-h adds a CTC head on
the overlapped encoding; encsep and gencsep add a separator whose
per-speaker streams carry CTC losses in serialized speaker order, and
gencsep additionally decodes by attending over the time-concatenation of
those streams instead of the overlapped encoding. encsep and sot share an
identical inference path, so the separator costs nothing at decode time.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import labels as lab
from . import losses
from . import nn
from .autodiff import Tensor

VARIANTS = ("sot", "sot-h", "encsep", "gencsep")


@dataclass(frozen=True)
class SeparatorConfig:
    """Separator sizing; head output width always equals the encoder
    output width so decoding code is shared."""
    lstm_layers: int = 2
    lstm_hidden: int = 32
    bidirectional: bool = False
    max_speakers: int = 2


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "sot"
    feature_dim: int = 16
    enc_hidden: int = 16
    enc_layers: int = 2
    dec_hidden: int = 32
    embed_dim: int = 32
    att_dim: int = 32
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    sc_in_ctc: bool = True  # sot-h CTC target keeps the separator token

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def d_enc(self):
        return 2 * self.enc_hidden

    @property
    def has_separator(self):
        return self.variant in ("encsep", "gencsep")


@dataclass
class DecodeResult:
    tokens: list            # token ids, start token and end token excluded
    log_score: float        # sum of per-step log-probs (end token included)
    streams: list           # decoded token strings split on the separator
    diagnostics: dict


class Model:
    """One model variant with a flat, ordered parameter registry."""

    def __init__(self, config, vocab, seed=None):
        self.config = config
        self.vocab = vocab
        rng = None if seed is None else np.random.default_rng(seed)
        self._build(rng)

    def _build(self, rng):
        cfg = self.config
        V = self.vocab.size

        def make_rng():
            # zero parameters when no seed: loading overwrites them anyway
            return rng if rng is not None else _ZeroRng()

        self.encoder = nn.LstmStack(cfg.feature_dim, cfg.enc_hidden,
                                    cfg.enc_layers, bidirectional=True,
                                    rng=make_rng())
        self.separator_lstm = None
        self.separator_norm = None
        self.separator_heads = None
        self.ctc_heads = None
        if cfg.has_separator:
            sep = cfg.separator
            self.separator_lstm = nn.LstmStack(cfg.d_enc, sep.lstm_hidden,
                                               sep.lstm_layers,
                                               sep.bidirectional, make_rng())
            width = self.separator_lstm.out_dim
            self.separator_norm = (
                Tensor(np.ones(width), requires_grad=True),
                Tensor(np.zeros(width), requires_grad=True))
            self.separator_heads = [nn.Linear(width, cfg.d_enc, make_rng())
                                    for _ in range(sep.max_speakers)]
            self.ctc_heads = [nn.Linear(cfg.d_enc, V, make_rng())
                              for _ in range(sep.max_speakers)]
        elif cfg.variant == "sot-h":
            self.ctc_heads = [nn.Linear(cfg.d_enc, V, make_rng())]

        self.embedding = nn.uniform_init(make_rng(), (V, cfg.embed_dim), cfg.embed_dim)
        self.decoder_lstm = nn.LstmStack(cfg.embed_dim, cfg.dec_hidden, 1,
                                         bidirectional=False, rng=make_rng())
        self.attention = nn.AttentionHead(cfg.dec_hidden, cfg.d_enc,
                                          cfg.att_dim, make_rng())
        self.out_proj = nn.Linear(cfg.dec_hidden + cfg.att_dim, V, make_rng())

    def parameters(self):
        out = {}
        for name, p in self.encoder.parameters().items():
            out[f"encoder.{name}"] = p
        if self.separator_lstm is not None:
            for name, p in self.separator_lstm.parameters().items():
                out[f"separator.lstm.{name}"] = p
            out["separator.norm.gain"] = self.separator_norm[0]
            out["separator.norm.bias"] = self.separator_norm[1]
            for s, head in enumerate(self.separator_heads):
                for name, p in head.parameters().items():
                    out[f"separator.head{s}.{name}"] = p
        if self.ctc_heads is not None:
            for s, head in enumerate(self.ctc_heads):
                for name, p in head.parameters().items():
                    out[f"ctc_head{s}.{name}"] = p
        out["decoder.embedding"] = self.embedding
        for name, p in self.decoder_lstm.parameters().items():
            out[f"decoder.lstm.{name}"] = p
        for name, p in self.attention.parameters().items():
            out[f"decoder.attention.{name}"] = p
        for name, p in self.out_proj.parameters().items():
            out[f"decoder.out.{name}"] = p
        return out

    # ------------------------------------------------------------------
    # forward pieces

    def encode(self, features):
        if not isinstance(features, Tensor):
            features = Tensor(features)
        if features.data.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise ad.ShapeError(
                f"encode: features must be [T,{self.config.feature_dim}], "
                f"got {features.shape}")
        return self.encoder(features)

    def separate(self, H):
        """Per-speaker encodings in serialized (start-time) speaker order."""
        if self.separator_lstm is None:
            raise ValueError(f"variant {self.config.variant!r} has no separator")
        gain, bias = self.separator_norm
        normed = ad.layer_norm(self.separator_lstm(H), gain, bias)
        return [ad.relu(head(normed)) for head in self.separator_heads]

    def _decoder_memory(self, H):
        if self.config.variant == "gencsep":
            return ad.concat_time(self.separate(H))
        return H

    def _teacher_forced_log_probs(self, memory, dec_in_ids):
        emb = ad.gather_rows(self.embedding, dec_in_ids)
        d = self.decoder_lstm(emb)
        keys, values = self.attention.project_memory(memory)
        n = len(dec_in_ids)
        contexts = []
        for i in range(n):
            q = ad.reshape(ad.slice_rows(d, i, i + 1), (self.config.dec_hidden,))
            context, _ = self.attention(q, keys, values)
            contexts.append(ad.reshape(context, (1, self.config.att_dim)))
        ctx = ad.concat_time(contexts)
        logits = self.out_proj(ad.concat_cols([d, ctx]))
        return ad.log_softmax(logits)

    def _stream_ids(self, sample):
        streams = lab.split_on_sc(sample.label_tokens)
        return [self.vocab.encode(s) for s in streams]

    def forward_loss(self, sample, weight, warmup=False):
        """Variant loss and per-component diagnostics for one sample.

        ``weight`` is the CTC share of the hybrid loss (ignored by sot).
        ``warmup`` forces the CTC share to zero for variants that have one.
        """
        cfg = self.config
        stream_ids = self._stream_ids(sample)
        S = len(stream_ids)
        if cfg.has_separator and S > cfg.separator.max_speakers:
            raise ValueError(
                f"sample has {S} speakers but separator supports "
                f"{cfg.separator.max_speakers}")
        serialized = []
        for k, ids in enumerate(stream_ids):
            if k:
                serialized.append(self.vocab.sc_id)
            serialized.extend(ids)

        feats = sample.features if isinstance(sample.features, Tensor) \
            else Tensor(sample.features)
        H = self.encode(feats)
        ctc_weight = 0.0 if (warmup or cfg.variant == "sot") else float(weight)

        ce_memory = H
        separated = None
        if cfg.variant == "gencsep":
            separated = self.separate(H)
            ce_memory = ad.concat_time(separated)
        dec_in = [self.vocab.sos_id] + serialized
        targets = serialized + [self.vocab.eos_id]
        log_probs = self._teacher_forced_log_probs(ce_memory, dec_in)
        ce = losses.ce_serialized(log_probs, targets)
        diagnostics = {"ce": ce.item()}

        if cfg.variant == "sot" or ctc_weight == 0.0:
            loss = ce
        elif cfg.variant == "sot-h":
            target = serialized if cfg.sc_in_ctc else [
                t for t in serialized if t != self.vocab.sc_id]
            lp = ad.log_softmax(self.ctc_heads[0](H))
            ctc = losses.ctc_forward_backward(lp, target, self.vocab.blank_id)
            diagnostics["ctc"] = ctc.item()
            loss = losses.hybrid(ctc, ce, ctc_weight)
        else:
            if separated is None:
                separated = self.separate(H)
            s_max = cfg.separator.max_speakers
            padded = stream_ids + [[]] * (s_max - S)
            stream_lp = [ad.log_softmax(self.ctc_heads[s](separated[s]))
                         for s in range(s_max)]
            ctc = losses.encsep_ctc(stream_lp, padded, self.vocab.blank_id)
            diagnostics["ctc"] = ctc.item()
            diagnostics["ctc_per_stream"] = [
                losses.ctc_forward_backward(stream_lp[s], padded[s],
                                            self.vocab.blank_id).item()
                for s in range(s_max)]
            loss = losses.hybrid(ctc, ce, ctc_weight)

        diagnostics["loss"] = loss.item()
        return loss, diagnostics

    # ------------------------------------------------------------------
    # decoding

    def _decode_setup(self, features):
        """Raw numpy memory/keys/values for stepwise decoding."""
        H = self.encode(Tensor(np.asarray(features, dtype=np.float64)))
        memory = self._decoder_memory(H)
        keys, values = self.attention.project_memory(memory)
        return memory.data, keys.data, values.data

    def _decode_step(self, last_token, h, c, keys, values):
        cfg = self.config
        x = self.embedding.data[last_token]
        h2, c2 = nn.lstm_step_np(self.decoder_lstm.layers[0][0], x, h, c)
        att = self.attention
        q = h2 @ att.wq.weight.data + att.wq.bias.data
        scores = (keys @ q) / np.sqrt(cfg.att_dim)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        context = w @ values
        logits = (np.concatenate([h2, context]) @ self.out_proj.weight.data
                  + self.out_proj.bias.data)
        shifted = logits - logits.max()
        logp = shifted - np.log(np.exp(shifted).sum())
        return logp, h2, c2

    def decode_beam(self, features, beam=4, max_len=40):
        """Beam search from the start token.

        At each step every live hypothesis proposes its top-beam
        extensions; ending extensions move to the finished pool without
        occupying beam slots. The final ranking, over finished hypotheses
        and any cut off at max_len together, is by length-normalized score
        (score / scored steps); an unfinished winner is flagged in the
        diagnostics. beam=1 reduces to greedy decoding.
        """
        if beam < 1:
            raise ValueError("beam must be >= 1")
        memory, keys, values = self._decode_setup(features)
        hsz = self.config.dec_hidden
        eos = self.vocab.eos_id
        # live hypotheses: (tokens tuple, score, h, c)
        live = [((), 0.0, np.zeros(hsz), np.zeros(hsz))]
        pool = []  # (tokens tuple, score, scored steps, finished)
        for _ in range(max_len):
            candidates = []
            for tokens, score, h, c in live:
                prev = tokens[-1] if tokens else self.vocab.sos_id
                logp, h2, c2 = self._decode_step(prev, h, c, keys, values)
                order = np.argsort(-logp, kind="stable")[:beam]
                for tok in order:
                    tok = int(tok)
                    cand_score = score + float(logp[tok])
                    if tok == eos:
                        pool.append((tokens, cand_score, len(tokens) + 1, True))
                    else:
                        candidates.append((tokens + (tok,), cand_score, h2, c2))
            candidates.sort(key=lambda cand: (-cand[1], cand[0]))
            live = candidates[:beam]
            if not live:
                break
        pool.extend((t, s, max(len(t), 1), False) for t, s, _, _ in live)

        pool.sort(key=lambda f: (-(f[1] / f[2]), f[0]))
        tokens, score, steps, finished = pool[0]

        token_list = list(tokens)
        streams = lab.split_on_sc(self.vocab.decode(token_list))
        if not streams:
            streams = [[]]
        return DecodeResult(
            tokens=token_list,
            log_score=score,
            streams=streams,
            diagnostics={
                "normalized_score": score / steps,
                "attention_keys": int(memory.shape[0]),
                "finished": finished,
                "beam": beam,
            },
        )

    def greedy_ctc_streams(self, features):
        """Per-head CTC greedy decodes of the separated streams, used as a
        qualitative separation check."""
        if self.separator_lstm is None:
            raise ValueError("greedy_ctc_streams requires a separator")
        H = self.encode(Tensor(np.asarray(features, dtype=np.float64)))
        out = []
        for s, stream in enumerate(self.separate(H)):
            lp = ad.log_softmax(self.ctc_heads[s](stream))
            out.append(ctc_greedy_decode(lp, self.vocab.blank_id))
        return out


class _ZeroRng:
    """Initializer stand-in producing zeros, for models about to be loaded."""

    def uniform(self, low, high, size=None):
        return np.zeros(size)

    def normal(self, *args, **kwargs):  # pragma: no cover - not used today
        size = kwargs.get("size")
        return np.zeros(size)


def ctc_greedy_decode(stream_log_probs, blank_id=0):
    """Per-frame argmax, collapse adjacent repeats, remove blanks."""
    data = stream_log_probs.data if isinstance(stream_log_probs, Tensor) \
        else np.asarray(stream_log_probs)
    path = data.argmax(axis=1)
    out = []
    prev = -1
    for p in path:
        p = int(p)
        if p != prev and p != blank_id:
            out.append(p)
        prev = p
    return out


def encode(model, features):
    return model.encode(features)


def separate(model, H):
    return model.separate(H)


def forward_loss(model, sample, weight, warmup=False):
    return model.forward_loss(sample, weight, warmup)


def decode_beam(model, features, beam=4, max_len=40):
    return model.decode_beam(features, beam=beam, max_len=max_len)
