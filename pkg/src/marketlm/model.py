"""Interleaved text/time-series transformer with modality-specific experts.

One shared residual stream; per-modality layer norms, attention projections,
and MLPs route tokens by modality tag while a single causal attention runs
over the concatenated stream. Cross-modality attention is confined to the
upper layers (modality-isolated masks below). Rotary rotations on q/k carry
relative position; dual output heads score next-token predictions per
modality and a 2-layer MLP head classifies from the end-of-sequence state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .sequence import TEXT, TS

ALLOWED_ADAPTER_RANKS = (16, 32, 64)


class ContractError(ValueError):
    pass


@dataclass
class ModelConfig:
    text_vocab: int
    ts_bins: int
    eos_id: int
    layers: int = 8
    d_model: int = 128
    heads: int = 4
    d_ts: int = 32
    ts_channels: int = 1
    cross_modal_start: int | None = None  # default: layers // 2 + 1 (1-based)
    cross_modal_layers: tuple | None = None  # explicit layer set overrides start
    rotary_base: float = 10000.0
    dropout: float = 0.0
    adapter_rank: int | None = None
    mlp_mult: int = 2
    cls_hidden: int = 32
    separate_qkv: bool = True   # ablation: modality experts for LN1/QKV/out-proj
    separate_mlp: bool = True   # ablation: modality experts for LN2/MLP
    share_out_proj: bool = False
    ts_embed_mode: str = "discrete"  # discrete | linear | mlp
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ContractError("d_model must be divisible by heads")
        if self.cross_modal_start is None:
            self.cross_modal_start = self.layers // 2 + 1
        if not 1 <= self.cross_modal_start <= self.layers + 1:
            raise ContractError("cross_modal_start outside [1, layers+1]")
        if self.ts_embed_mode not in ("discrete", "linear", "mlp"):
            raise ContractError(f"unknown ts_embed_mode {self.ts_embed_mode!r}")

    @property
    def head_dim(self):
        return self.d_model // self.heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def cross_modal_at(self, layer):
        """True when 1-based `layer` performs cross-modal attention."""
        if self.cross_modal_layers is not None:
            return layer in self.cross_modal_layers
        return layer >= self.cross_modal_start


@dataclass
class ForwardResult:
    hidden: Tensor            # (L, d_model) final states after per-modality LN
    text_logits: Tensor       # (L, text_vocab)
    ts_logits: list           # per channel: (L, ts_bins), discrete mode
    ts_preds: Tensor | None   # (L, channels), continuous modes


class ModelParams:
    """Named parameter tensors plus branch bookkeeping.

    Time-series branch weights are initialized as copies of the matching
    text-branch values (shared-variant configs alias them instead). The text
    branch is freezable as a unit; adapters add low-rank trainable deltas on
    ts-branch linear maps.
    """

    def __init__(self, config, tensors, text_names, ts_names):
        self.config = config
        self.tensors = tensors          # name -> Tensor
        self.text_names = text_names    # frozen as a unit by freeze_text
        self.ts_names = ts_names
        self.adapters = {}              # base name -> (A, B)
        self.text_frozen = False
        self._rope_cache = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config, codec=None):
        rng = np.random.default_rng(config.seed)
        dt = config.np_dtype
        d, dh = config.d_model, config.d_ts

        def lin(n_in, n_out):
            return (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dt)

        tensors = {}
        text_names, ts_names = [], []

        def add(name, value, branch=None):
            tensors[name] = Tensor(np.asarray(value, dtype=dt), requires_grad=True)
            if branch == "text":
                text_names.append(name)
            elif branch == "ts":
                ts_names.append(name)

        add("text_emb", rng.standard_normal((config.text_vocab, d)).astype(dt) * 0.02,
            "text")
        for l in range(1, config.layers + 1):
            for part, shape in (("ln1.g", (d,)), ("ln1.b", (d,)),
                                ("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)),
                                ("wo", (d, d)),
                                ("ln2.g", (d,)), ("ln2.b", (d,)),
                                ("w1", (d, config.mlp_mult * d)),
                                ("w2", (config.mlp_mult * d, d))):
                if part.startswith("ln") and part.endswith(".g"):
                    val = np.ones(shape, dtype=dt)
                elif part.startswith("ln"):
                    val = np.zeros(shape, dtype=dt)
                else:
                    val = lin(*shape)
                add(f"l{l}.text.{part}", val, "text")
        add("final.text.ln.g", np.ones(d, dtype=dt), "text")
        add("final.text.ln.b", np.zeros(d, dtype=dt), "text")
        add("head.text", lin(d, config.text_vocab), "text")

        # ts branch: copies of the text values (or aliases for shared variants)
        qkv_parts = ("ln1.g", "ln1.b", "wq", "wk", "wv", "wo")
        mlp_parts = ("ln2.g", "ln2.b", "w1", "w2")
        for l in range(1, config.layers + 1):
            for part in qkv_parts + mlp_parts:
                text_name = f"l{l}.text.{part}"
                ts_name = f"l{l}.ts.{part}"
                separate = config.separate_qkv if part in qkv_parts else config.separate_mlp
                if part == "wo" and config.share_out_proj:
                    separate = False
                if separate:
                    add(ts_name, tensors[text_name].data.copy(), "ts")
                else:
                    tensors[ts_name] = tensors[text_name]
        if config.separate_qkv or config.separate_mlp:
            add("final.ts.ln.g", np.ones(d, dtype=dt), "ts")
            add("final.ts.ln.b", np.zeros(d, dtype=dt), "ts")
        else:
            tensors["final.ts.ln.g"] = tensors["final.text.ln.g"]
            tensors["final.ts.ln.b"] = tensors["final.text.ln.b"]

        for c in range(config.ts_channels):
            add(f"head.ts.{c}", lin(d, config.ts_bins if config.ts_embed_mode == "discrete" else 1))
        if config.ts_embed_mode == "discrete":
            for c in range(config.ts_channels):
                if codec is not None:
                    chans = codec.channels if hasattr(codec, "channels") else [(None, codec)]
                    emb = chans[c][1].embedding
                    proj = chans[c][1].projection
                else:
                    emb = rng.standard_normal((config.ts_bins, dh)) * 0.02
                    proj = rng.standard_normal((dh, d)) / np.sqrt(dh)
                add(f"ts_emb.{c}.table", np.asarray(emb, dtype=dt), "ts")
                add(f"ts_emb.{c}.proj", np.asarray(proj, dtype=dt), "ts")
        elif config.ts_embed_mode == "linear":
            add("ts_emb.lin.w", lin(config.ts_channels, d), "ts")
            add("ts_emb.lin.b", np.zeros(d, dtype=dt), "ts")
        else:  # mlp
            add("ts_emb.mlp.w1", lin(config.ts_channels, dh), "ts")
            add("ts_emb.mlp.b1", np.zeros(dh, dtype=dt), "ts")
            add("ts_emb.mlp.w2", lin(dh, d), "ts")
            add("ts_emb.mlp.b2", np.zeros(d, dtype=dt), "ts")

        add("cls.w1", lin(d, config.cls_hidden))
        add("cls.b1", np.zeros(config.cls_hidden, dtype=dt))
        # zero final layer so an untrained head scores exactly 0.5
        add("cls.w2", np.zeros((config.cls_hidden, 1), dtype=dt))
        add("cls.b2", np.zeros(1, dtype=dt))
        return cls(config, tensors, text_names, ts_names)

    # -- bookkeeping ---------------------------------------------------------

    def __getitem__(self, name):
        return self.tensors[name]

    def named_trainable(self):
        seen = set()
        out = []
        for name, t in self.tensors.items():
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                out.append((name, t))
        for base, (a, b) in self.adapters.items():
            out.append((f"adapter.{base}.A", a))
            out.append((f"adapter.{base}.B", b))
        return out

    def trainable(self):
        return [t for _, t in self.named_trainable()]

    def n_parameters(self):
        seen = set()
        n = 0
        for t in self.tensors.values():
            if id(t) not in seen:
                seen.add(id(t))
                n += t.data.size
        for a, b in self.adapters.values():
            n += a.data.size + b.data.size
        return n

    def freeze_text(self):
        """Frozen text branch never receives gradients; optimizer skips it."""
        for name in self.text_names:
            self.tensors[name].requires_grad = False
        self.text_frozen = True
        return self

    def apply_adapters(self, rank, allow_small_rank=False):
        """Attach zero-initialized low-rank deltas to every ts-branch linear.

        alpha is pinned at 2 * rank, so the scale alpha/rank is always 2.
        After this call only adapters, output heads, and the classifier are
        trainable when the text branch is frozen.
        """
        if self.adapters:
            raise ContractError("adapters already applied")
        if rank not in ALLOWED_ADAPTER_RANKS and not allow_small_rank:
            raise ContractError(f"adapter rank {rank} outside grid {ALLOWED_ADAPTER_RANKS}")
        rng = np.random.default_rng(self.config.seed + 1)
        dt = self.config.np_dtype
        for name in self._adapted_names():
            w = self.tensors[name]
            n_in, n_out = w.shape
            a = Tensor(np.zeros((n_in, rank), dtype=dt), requires_grad=True)
            b = Tensor((rng.standard_normal((rank, n_out)) / np.sqrt(rank)).astype(dt),
                       requires_grad=True)
            self.adapters[name] = (a, b)
        # base ts weights freeze once adapters carry the trainable capacity
        for name in self.ts_names:
            self.tensors[name].requires_grad = False
        self.adapter_rank = rank
        return self

    def _adapted_names(self):
        """ts-branch linear maps (2-D weights) that receive adapters."""
        names = []
        for name in self.ts_names:
            t = self.tensors[name]
            if t.ndim == 2 and not name.endswith(".table"):
                names.append(name)
        if not names:
            # fully shared variant: adapt the shared linear maps instead
            for l in range(1, self.config.layers + 1):
                for part in ("wq", "wk", "wv", "wo", "w1", "w2"):
                    names.append(f"l{l}.text.{part}")
        return names

    def weight(self, name):
        """Effective weight: base plus (alpha/rank) * A @ B when adapted."""
        w = self.tensors[name]
        pair = self.adapters.get(name)
        if pair is None and name.startswith("l") and ".ts." in name:
            # shared variants alias ts names onto text tensors; the adapter is
            # registered under the aliased (text) name
            alias = name.replace(".ts.", ".text.")
            if alias in self.adapters and self.tensors[alias] is w:
                pair = self.adapters[alias]
        if pair is None:
            return w
        a, b = pair
        return w + T.matmul(a, b) * 2.0  # alpha / rank = 2

    # -- rotary --------------------------------------------------------------

    def _rope(self, length):
        key = (length,)
        if key not in self._rope_cache:
            dh = self.config.head_dim
            dt = self.config.np_dtype
            inv = self.config.rotary_base ** (-np.arange(0, dh, 2) / dh)
            ang = np.arange(length)[:, None] * inv[None, :]
            cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1).astype(dt)
            sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1).astype(dt)
            self._rope_cache[key] = (cos, sin)
        return self._rope_cache[key]

    # -- checkpointing -------------------------------------------------------

    def save(self, path):
        arrays = {}
        aliases = {}
        for name, t in self.tensors.items():
            canonical = name
            for other, ot in self.tensors.items():
                if ot is t and other < canonical:
                    canonical = other
            if canonical != name:
                aliases[name] = canonical
            else:
                arrays[f"p::{name}"] = t.data
        for base, (a, b) in self.adapters.items():
            arrays[f"a::{base}::A"] = a.data
            arrays[f"a::{base}::B"] = b.data
        meta = {
            "version": 1,
            "config": asdict(self.config),
            "text_names": self.text_names,
            "ts_names": self.ts_names,
            "aliases": aliases,
            "text_frozen": self.text_frozen,
            "adapter_rank": getattr(self, "adapter_rank", None),
            "frozen": [n for n, t in self.tensors.items() if not t.requires_grad],
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            cfg = meta["config"]
            cfg["cross_modal_layers"] = (tuple(cfg["cross_modal_layers"])
                                         if cfg["cross_modal_layers"] else None)
            config = ModelConfig(**cfg)
            tensors = {}
            for key in z.files:
                if key.startswith("p::"):
                    name = key[3:]
                    tensors[name] = Tensor(z[key].copy(), requires_grad=True)
            for name, canonical in meta["aliases"].items():
                tensors[name] = tensors[canonical]
            params = cls(config, tensors, meta["text_names"], meta["ts_names"])
            for key in z.files:
                if key.startswith("a::") and key.endswith("::A"):
                    base = key[3:-3]
                    a = Tensor(z[key].copy(), requires_grad=True)
                    b = Tensor(z[f"a::{base}::B"].copy(), requires_grad=True)
                    params.adapters[base] = (a, b)
            if meta["adapter_rank"] is not None:
                params.adapter_rank = meta["adapter_rank"]
            for name in meta["frozen"]:
                params.tensors[name].requires_grad = False
            params.text_frozen = meta["text_frozen"]
        return params


# -- forward ----------------------------------------------------------------


def _route(params, h, tags, layer, part, m_text, m_ts):
    """Apply the modality-routed LN of `part` ('ln1'/'ln2') to the stream."""
    g_t = params[f"l{layer}.text.{part}.g"]
    b_t = params[f"l{layer}.text.{part}.b"]
    g_s = params[f"l{layer}.ts.{part}.g"]
    b_s = params[f"l{layer}.ts.{part}.b"]
    if g_s is g_t and b_s is b_t:
        return T.layernorm(h, g_t, b_t), None
    return T.layernorm(h, g_t, b_t), T.layernorm(h, g_s, b_s)


def _mix(x_text, x_ts, m_text, m_ts):
    if x_ts is None:
        return x_text
    return x_text * m_text + x_ts * m_ts


def input_embeddings(params, seq):
    """Token embeddings: text table rows or projected ts-bin embeddings."""
    cfg = params.config
    dt = cfg.np_dtype
    tags = seq.tags
    m_text = Tensor((tags == TEXT).astype(dt)[:, None])
    m_ts = Tensor((tags == TS).astype(dt)[:, None])
    text_ids = np.where(tags == TEXT, seq.ids, 0)
    e_text = T.take_rows(params["text_emb"], text_ids)
    if cfg.ts_embed_mode == "discrete":
        e_ts = None
        for c in range(cfg.ts_channels):
            bins = np.where(tags == TS, seq.ts_bins[:, c], 0)
            rows = T.take_rows(params[f"ts_emb.{c}.table"], bins)
            proj = T.matmul(rows, params.weight(f"ts_emb.{c}.proj"))
            e_ts = proj if e_ts is None else e_ts + proj
    else:
        vals = np.where(tags[:, None] == TS, np.nan_to_num(seq.ts_values), 0.0)
        v = Tensor(vals.astype(dt))
        if cfg.ts_embed_mode == "linear":
            e_ts = T.matmul(v, params.weight("ts_emb.lin.w")) + params["ts_emb.lin.b"]
        else:
            hmid = T.gelu(T.matmul(v, params.weight("ts_emb.mlp.w1"))
                          + params["ts_emb.mlp.b1"])
            e_ts = T.matmul(hmid, params.weight("ts_emb.mlp.w2")) + params["ts_emb.mlp.b2"]
    return e_text * m_text + e_ts * m_ts, m_text, m_ts


def forward(params, seq, masks):
    """Full forward pass; see the module docstring for the layer recipe."""
    if seq.length != masks.upper.shape[0]:
        raise ContractError("sequence / mask length mismatch")
    if seq.channels != params.config.ts_channels and params.config.ts_embed_mode == "discrete":
        raise ContractError(f"sequence has {seq.channels} channels, model expects "
                            f"{params.config.ts_channels}")
    E, m_text, m_ts = input_embeddings(params, seq)
    h = forward_from_embeddings(params, E, seq.tags, masks, m_text=m_text, m_ts=m_ts)
    cfg = params.config
    hf = _mix(T.layernorm(h, params["final.text.ln.g"], params["final.text.ln.b"]),
              None if params["final.ts.ln.g"] is params["final.text.ln.g"]
              else T.layernorm(h, params["final.ts.ln.g"], params["final.ts.ln.b"]),
              m_text, m_ts)
    text_logits = T.matmul(hf, params["head.text"])
    if cfg.ts_embed_mode == "discrete":
        ts_logits = [T.matmul(hf, params[f"head.ts.{c}"]) for c in range(cfg.ts_channels)]
        return ForwardResult(hf, text_logits, ts_logits, None)
    preds = T.concat([T.matmul(hf, params[f"head.ts.{c}"]) for c in range(cfg.ts_channels)],
                     axis=1)
    return ForwardResult(hf, text_logits, [], preds)


def forward_from_embeddings(params, E, tags, masks, m_text=None, m_ts=None):
    """Transformer stack over pre-built input embeddings (pre-final-LN)."""
    cfg = params.config
    dt = cfg.np_dtype
    if m_text is None:
        m_text = Tensor((tags == TEXT).astype(dt)[:, None])
        m_ts = Tensor((tags == TS).astype(dt)[:, None])
    L = E.shape[0]
    H, dh = cfg.heads, cfg.head_dim
    cos, sin = params._rope(L)
    cos_t, sin_t = Tensor(cos), Tensor(sin)
    scale = 1.0 / np.sqrt(dh)

    h = E
    for l in range(1, cfg.layers + 1):
        mask = masks.upper if cfg.cross_modal_at(l) else masks.lower

        xt, xs = _route(params, h, tags, l, "ln1", m_text, m_ts)

        def proj(part):
            p_t = T.matmul(xt, params.weight(f"l{l}.text.{part}"))
            ts_w = params.weight(f"l{l}.ts.{part}")
            base_same = params[f"l{l}.ts.{part}"] is params[f"l{l}.text.{part}"]
            if xs is None and base_same and ts_w is params[f"l{l}.ts.{part}"]:
                return p_t
            p_s = T.matmul(xt if xs is None else xs, ts_w)
            return _mix(p_t, p_s, m_text, m_ts)

        q, k, v = proj("wq"), proj("wk"), proj("wv")

        def heads(x):
            return T.transpose(T.reshape(x, (L, H, dh)), (1, 0, 2))

        q, k, v = heads(q), heads(k), heads(v)
        q = q * cos_t + T.rotate_half(q) * sin_t
        k = k * cos_t + T.rotate_half(k) * sin_t
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * scale
        attn = T.softmax_rows(scores, mask=mask[None, :, :])
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (L, cfg.d_model))

        o_t = T.matmul(ctx, params.weight(f"l{l}.text.wo"))
        if params[f"l{l}.ts.wo"] is params[f"l{l}.text.wo"] and \
                params.weight(f"l{l}.ts.wo") is params[f"l{l}.ts.wo"]:
            o = o_t
        else:
            o = _mix(o_t, T.matmul(ctx, params.weight(f"l{l}.ts.wo")), m_text, m_ts)
        h = h + o

        yt, ys = _route(params, h, tags, l, "ln2", m_text, m_ts)

        def mlp(x, branch):
            mid = T.gelu(T.matmul(x, params.weight(f"l{l}.{branch}.w1")))
            return T.matmul(mid, params.weight(f"l{l}.{branch}.w2"))

        f_t = mlp(yt, "text")
        ts_same = (params[f"l{l}.ts.w1"] is params[f"l{l}.text.w1"]
                   and params.weight(f"l{l}.ts.w1") is params[f"l{l}.ts.w1"]
                   and params.weight(f"l{l}.ts.w2") is params[f"l{l}.ts.w2"])
        if ys is None and ts_same:
            f = f_t
        else:
            f = _mix(f_t, mlp(yt if ys is None else ys, "ts"), m_text, m_ts)
        h = h + f
    return h


def classify(params, seq, masks):
    """Score in (0, 1) from the 2-layer head on the final (EOS) hidden state."""
    cfg = params.config
    if seq.ids[-1] != cfg.eos_id or seq.tags[-1] != TEXT:
        raise ContractError("sequence must end with the end-of-sequence token")
    result = forward(params, seq, masks)
    h_last = T.take_rows(result.hidden, [seq.length - 1])
    mid = T.gelu(T.matmul(h_last, params["cls.w1"]) + params["cls.b1"])
    logit = T.matmul(mid, params["cls.w2"]) + params["cls.b2"]
    return T.sigmoid(T.reshape(logit, (1,)))


def classify_logit(params, hidden, last_index):
    """Classifier logit from precomputed hidden states (training path)."""
    h_last = T.take_rows(hidden, [last_index])
    mid = T.gelu(T.matmul(h_last, params["cls.w1"]) + params["cls.b1"])
    return T.reshape(T.matmul(mid, params["cls.w2"]) + params["cls.b2"], (1,))
