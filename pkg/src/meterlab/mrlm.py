"""Meter-reading model with template cross-attention and a gated expert mixture.

Pipeline (all stages optional except encoder and decoder)::

    image -> encoder taps (early | mid | late) -> F_img            [T, 3d]
    template renders -> same encoder -> F_template                 [K*T, 3d]
    KFM:  F_enh = F_template + softmax(Q K^T / sqrt(dk)) V         [K*T, 3d]
          Q from F_template, K and V from F_img
    MoE:  x = MLP(mean over the K template groups of F_enh) + F_img [T, 3d]
          p = softmax(G(mean_t x)),  F_moe = sum_i p_i E_i(x)
    decoder: learned queries attend to F_moe, join text-prompt tokens,
          one fusion block, per-slot logits over a 13-symbol vocabulary.

Batched tensors carry a leading batch axis; the template bank has none and
broadcasts.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tt
from .dialgen import DialSpec, LabelError, parse_label, render_dial
from .tensor import Tensor

VOCAB = tuple("0123456789.-") + ("<eos>",)
EOS = len(VOCAB) - 1
V = len(VOCAB)
_SYM = {s: i for i, s in enumerate(VOCAB[:EOS])}


@dataclass
class ModelConfig:
    img_size: int = 64
    patch: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    mlp_ratio: int = 2
    K_templates: int = 6
    n_experts: int = 8
    expert_hidden: int = 64
    n_queries: int = 6
    label_slots: int = 6
    n_text: int = 4
    kfm_project: bool = True
    gate_per_token: bool = False
    use_kfm: bool = True
    use_moe: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.img_size % self.patch:
            raise ValueError("img_size must be a multiple of patch")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.K_templates < 1:
            raise ValueError("K_templates must be >= 1")
        if self.n_experts < 2:
            raise ValueError("n_experts must be >= 2")

    @property
    def n_tokens(self) -> int:
        return (self.img_size // self.patch) ** 2

    @property
    def tap_dim(self) -> int:
        return 3 * self.d_model

    @property
    def tap_blocks(self) -> tuple[int, int, int]:
        """1-based indices of the encoder blocks feeding the early/mid/late taps."""
        L = self.n_layers
        return (math.ceil(L / 4), math.ceil(L / 2), L)

    @property
    def kfm_dk(self) -> int:
        return self.d_model if self.kfm_project else self.tap_dim

    def to_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = {k: v for k, v in d.items() if k != "schema_version"}
        return cls(**d)


PAPER_SCALE = ModelConfig(img_size=224, patch=14, d_model=1408, n_heads=16, n_layers=40,
                          K_templates=6, n_experts=8)


def shape_plan(cfg: ModelConfig, batch: int | None = None) -> dict[str, tuple]:
    """Symbolic shapes of the named intermediate features (no arrays allocated)."""
    T, C, K = cfg.n_tokens, cfg.tap_dim, cfg.K_templates
    lead = () if batch is None else (batch,)
    return {
        "F_tap": lead + (T, cfg.d_model),
        "F_i": (T, C),
        "F_img": lead + (T, C),
        "F_template": (K * T, C),
        "F_attn": lead + (K * T, C),
        "F_enhanced": lead + (K * T, C),
        "x": lead + (T, C),
        "gate": lead + ((T, cfg.n_experts) if cfg.gate_per_token else (cfg.n_experts,)),
        "F_moe": lead + (T, C),
        "logits": lead + (cfg.label_slots, V),
    }


# ---------------------------------------------------------------- tokenizer

def encode_label(label: str, slots: int) -> tuple[np.ndarray, np.ndarray]:
    """Slot ids and loss mask: symbols, one EOS if room, then masked padding."""
    if len(label) > slots:
        raise LabelError(f"label {label!r} longer than {slots} slots")
    try:
        ids = [_SYM[ch] for ch in label]
    except KeyError as exc:
        raise LabelError(f"label {label!r} has a symbol outside the vocabulary") from exc
    mask = [True] * len(ids)
    if len(ids) < slots:
        ids.append(EOS)
        mask.append(True)
    while len(ids) < slots:
        ids.append(EOS)
        mask.append(False)
    return np.array(ids, dtype=np.int64), np.array(mask)


def decode_ids(ids: Sequence[int]) -> str:
    out = []
    for i in ids:
        if i == EOS:
            break
        out.append(VOCAB[int(i)])
    return "".join(out)


# ---------------------------------------------------------------- parameters

@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def save(self, path) -> None:
        path = Path(path)
        tt.save_checkpoint(path, self.arrays())
        path.with_suffix(".config.json").write_text(json.dumps(self.config.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ModelState":
        path = Path(path)
        cfg = ModelConfig.from_dict(json.loads(path.with_suffix(".config.json").read_text()))
        arrays = tt.load_checkpoint(path)
        dtype = np.dtype(cfg.dtype)
        return cls(cfg, {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in arrays.items()})


def init_state(cfg: ModelConfig, seed: int = 0, zero_init: bool = True) -> ModelState:
    """Fresh parameters. ``zero_init`` zeroes the KFM value projection, the fusion MLP output and the output head."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    d, C, T = cfg.d_model, cfg.tap_dim, cfg.n_tokens
    P = cfg.patch * cfg.patch * 3
    params: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out, zero=False):
        if zero and zero_init:
            params[name] = np.zeros((fan_in, fan_out))
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    def vec(name, n, value=0.0):
        params[name] = np.full(n, value)

    def ln(name, n):
        vec(name + ".g", n, 1.0)
        vec(name + ".b", n, 0.0)

    def block(prefix):
        ln(prefix + ".ln1", d)
        dense(prefix + ".qkv", d, 3 * d)
        vec(prefix + ".qkv_b", 3 * d)
        dense(prefix + ".proj", d, d)
        vec(prefix + ".proj_b", d)
        ln(prefix + ".ln2", d)
        dense(prefix + ".fc1", d, cfg.mlp_ratio * d)
        vec(prefix + ".fc1_b", cfg.mlp_ratio * d)
        dense(prefix + ".fc2", cfg.mlp_ratio * d, d)
        vec(prefix + ".fc2_b", d)

    dense("enc.patch", P, d)
    vec("enc.patch_b", d)
    params["enc.pos"] = rng.normal(0.0, 0.02, size=(T, d))
    for layer in range(cfg.n_layers):
        block(f"enc.block{layer}")
    for tap in range(3):
        ln(f"enc.tap{tap}", d)

    if cfg.kfm_project:
        dense("kfm.wq", C, cfg.kfm_dk)
        dense("kfm.wk", C, cfg.kfm_dk)
        dense("kfm.wv", C, C, zero=True)

    dense("moe.mlp1", C, d)
    vec("moe.mlp1_b", d)
    dense("moe.mlp2", d, C, zero=True)
    vec("moe.mlp2_b", C)
    dense("moe.gate", C, cfg.n_experts)
    vec("moe.gate_b", cfg.n_experts)
    n, h = cfg.n_experts, cfg.expert_hidden
    params["moe.fc1"] = rng.normal(0.0, 1.0 / math.sqrt(C), size=(n, C, h))
    params["moe.fc1_b"] = np.zeros((n, 1, h))
    params["moe.fc2"] = rng.normal(0.0, 1.0 / math.sqrt(h), size=(n, h, C))
    params["moe.fc2_b"] = np.zeros((n, 1, C))

    params["dec.queries"] = rng.normal(0.0, 1.0, size=(cfg.n_queries, d))
    params["dec.text"] = rng.normal(0.0, 1.0, size=(cfg.n_text, d))
    ln("dec.ln_q", d)
    ln("dec.ln_kv", C)
    dense("dec.wq", d, d)
    dense("dec.wk", C, d)
    dense("dec.wv", C, d)
    dense("dec.wo", d, d)
    block("dec.fuse")
    ln("dec.ln_out", cfg.n_queries * d)
    dense("dec.head", cfg.n_queries * d, cfg.label_slots * V, zero=True)
    vec("dec.head_b", cfg.label_slots * V)

    if not zero_init:
        # perturb biases and norms too, so finite-difference checks see generic values
        for k in list(params):
            if k.endswith((".b", "_b", ".g")):
                params[k] = params[k] + rng.normal(0.0, 0.1, size=params[k].shape)

    return ModelState(cfg, {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in params.items()})


# ---------------------------------------------------------------- building blocks

def _ln(x: Tensor, P, name) -> Tensor:
    return tt.layer_norm(x, P[name + ".g"], P[name + ".b"])


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = tt.matmul(x, w)
    return y if b is None else tt.add(y, b)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    x = tt.reshape(x, (*lead, n, h, d // h))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return tt.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return tt.reshape(tt.transpose(x, axes), (*lead, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(dk)) v over the last two axes."""
    scores = tt.scale(tt.matmul(q, tt.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return tt.matmul(tt.softmax(scores, axis=-1), v)


def _block(x: Tensor, P, prefix: str, n_heads: int) -> Tensor:
    d = x.shape[-1]
    h = _ln(x, P, prefix + ".ln1")
    qkv = _linear(h, P[prefix + ".qkv"], P[prefix + ".qkv_b"])
    q = _split_heads(qkv[..., :d], n_heads)
    k = _split_heads(qkv[..., d:2 * d], n_heads)
    v = _split_heads(qkv[..., 2 * d:], n_heads)
    a = _linear(_merge_heads(attention(q, k, v)), P[prefix + ".proj"], P[prefix + ".proj_b"])
    x = tt.add(x, a)
    h = _ln(x, P, prefix + ".ln2")
    h = tt.gelu(_linear(h, P[prefix + ".fc1"], P[prefix + ".fc1_b"]))
    return tt.add(x, _linear(h, P[prefix + ".fc2"], P[prefix + ".fc2_b"]))


def patchify(images: np.ndarray, patch: int, dtype) -> np.ndarray:
    """``(B, H, W, 3)`` uint8 -> ``(B, T, patch*patch*3)`` centred floats."""
    B, H, W, Cc = images.shape
    g = H // patch
    x = images.reshape(B, g, patch, g, patch, Cc).transpose(0, 1, 3, 2, 4, 5)
    return (x.reshape(B, g * g, patch * patch * Cc).astype(dtype) / 255.0 - 0.5).astype(dtype)


# ---------------------------------------------------------------- stages

def encode_images(images: np.ndarray, state: ModelState, use_pos: bool = True) -> Tensor:
    """Multi-depth features ``[B, T, 3d]`` for a uint8 image stack."""
    cfg, P = state.config, state.params
    if images.ndim != 4 or images.shape[1:] != (cfg.img_size, cfg.img_size, 3):
        raise ValueError(f"expected images of shape (B, {cfg.img_size}, {cfg.img_size}, 3), got {images.shape}")
    x = Tensor(patchify(images, cfg.patch, np.dtype(cfg.dtype)))
    x = _linear(x, P["enc.patch"], P["enc.patch_b"])
    if use_pos:
        x = tt.add(x, P["enc.pos"])
    taps = {}
    wanted = cfg.tap_blocks
    for layer in range(cfg.n_layers):
        x = _block(x, P, f"enc.block{layer}", cfg.n_heads)
        if layer + 1 in wanted:
            taps[layer + 1] = x
    feats = [_ln(taps[b], P, f"enc.tap{i}") for i, b in enumerate(wanted)]
    out = tt.concat_cols(feats)
    assert out.shape[1:] == shape_plan(cfg)["F_img"], out.shape
    return out


def encode_image(img: np.ndarray, state: ModelState) -> Tensor:
    """``F_img`` of one image, shape ``[T, 3d]``."""
    return tt.reshape(encode_images(img[None], state), shape_plan(state.config)["F_img"])


@dataclass
class TemplateBank:
    specs: list[DialSpec]
    images: np.ndarray  # (K, H, W, 3) uint8
    features: Tensor | None = None  # cached F_template [K*T, 3d]

    @property
    def K(self) -> int:
        return len(self.images)


_TEMPLATE_POSITIONS = (0.5, 0.25, 0.75, 0.125, 0.875)


def template_images(specs: Sequence[DialSpec], K: int, size: int) -> tuple[list[DialSpec], np.ndarray]:
    """K clean renders ordered by archetype id; extra templates cycle through pointer positions."""
    specs = sorted(specs, key=lambda s: s.archetype_id)
    chosen, imgs = [], []
    for j in range(K):
        spec = specs[j % len(specs)]
        frac = _TEMPLATE_POSITIONS[(j // len(specs)) % len(_TEMPLATE_POSITIONS)]
        reading = spec.range_min + frac * spec.span
        chosen.append(spec)
        imgs.append(render_dial(spec, reading, render_seed=0, size=size))
    return chosen, np.stack(imgs)


def template_features(state: ModelState, images: np.ndarray) -> Tensor:
    """``F_template = Concat(F_1, ..., F_K)`` along rows."""
    feats = encode_images(images, state)
    K, T, C = feats.shape
    return tt.reshape(feats, (K * T, C))


def build_template_bank(state: ModelState, specs: Sequence[DialSpec], cache: bool = True) -> TemplateBank:
    cfg = state.config
    if "enc.patch" not in state.params:
        raise RuntimeError("encoder parameters are not initialised")
    if not specs:
        raise ValueError("template bank needs at least one dial spec")
    chosen, imgs = template_images(specs, cfg.K_templates, cfg.img_size)
    bank = TemplateBank(chosen, imgs)
    if cache:
        with tt.no_grad():
            bank.features = template_features(state, imgs)
    return bank


def kfm_forward(F_template: Tensor, F_img: Tensor, state: ModelState, return_weights: bool = False):
    """Template-queried cross-attention with residual fusion: ``F_template + F_attn``."""
    P = state.params
    if F_template.shape[-1] != F_img.shape[-1]:
        raise ValueError(f"KFM dimension mismatch: {F_template.shape} vs {F_img.shape}")
    if state.config.kfm_project:
        q = tt.matmul(F_template, P["kfm.wq"])
        k = tt.matmul(F_img, P["kfm.wk"])
        v = tt.matmul(F_img, P["kfm.wv"])
    else:
        q, k, v = F_template, F_img, F_img
    scores = tt.scale(tt.matmul(q, tt.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = tt.softmax(scores, axis=-1)
    F_attn = tt.matmul(weights, v)
    F_enh = tt.add(F_template, F_attn)
    return (F_enh, weights) if return_weights else F_enh


def pool_templates(F_enh: Tensor, K: int) -> Tensor:
    """Average the K template row-groups: ``[.., K*T, C] -> [.., T, C]``."""
    *lead, KT, C = F_enh.shape
    return tt.mean(tt.reshape(F_enh, (*lead, K, KT // K, C)), axis=len(lead))


def relation_input(F_enh: Tensor | None, F_img: Tensor, state: ModelState) -> Tensor:
    """``x = MLP(pool_K(F_enh)) + F_img`` (just ``F_img`` when KFM is off)."""
    if F_enh is None:
        return F_img
    P = state.params
    h = pool_templates(F_enh, state.config.K_templates)
    h = tt.gelu(_linear(h, P["moe.mlp1"], P["moe.mlp1_b"]))
    return tt.add(_linear(h, P["moe.mlp2"], P["moe.mlp2_b"]), F_img)


def gate_probs(x: Tensor, state: ModelState) -> Tensor:
    P = state.params
    summary = x if state.config.gate_per_token else tt.mean(x, axis=-2)
    return tt.softmax(_linear(summary, P["moe.gate"], P["moe.gate_b"]), axis=-1)


def expert_outputs(x: Tensor, state: ModelState) -> Tensor:
    """All experts on ``x [.., T, C]`` -> ``[n, .., T, C]`` (2-layer GELU MLPs)."""
    P = state.params
    lead = x.shape[:-1]
    C = x.shape[-1]
    n = state.config.n_experts
    flat = tt.reshape(x, (1, int(np.prod(lead)), C))
    h = tt.gelu(tt.add(tt.matmul(flat, P["moe.fc1"]), P["moe.fc1_b"]))
    y = tt.add(tt.matmul(h, P["moe.fc2"]), P["moe.fc2_b"])
    return tt.reshape(y, (n, *lead, C))


def mixture(p: Tensor, Y: Tensor) -> Tensor:
    """``sum_i p_i * Y_i`` accumulated in expert order.

    ``p`` is ``[B, n]`` (one routing per image) or ``[B, T, n]`` (per token);
    ``Y`` is ``[n, B, T, C]``.
    """
    pd, yd = p.data, Y.data
    n = yd.shape[0]
    per_token = pd.ndim == 3

    def w(i):
        return pd[:, :, i, None] if per_token else pd[:, i, None, None]

    acc = w(0) * yd[0]
    for i in range(1, n):
        acc = acc + w(i) * yd[i]

    def bw(g):
        gY = np.stack([w(i) * g for i in range(n)])
        if per_token:
            gp = np.stack([(g * yd[i]).sum(axis=-1) for i in range(n)], axis=-1)
        else:
            gp = np.stack([(g * yd[i]).sum(axis=(-2, -1)) for i in range(n)], axis=-1)
        return gp, gY

    return tt.make_op(acc, (p, Y), bw)


def moe_forward(F_enh: Tensor | None, F_img: Tensor, state: ModelState, return_gate: bool = False):
    """Gated mixture over experts; ``F_enh=None`` routes ``F_img`` directly."""
    if state.config.n_experts < 2:
        raise ValueError("MoE needs at least two experts")
    x = relation_input(F_enh, F_img, state)
    p = gate_probs(x, state)
    F_moe = mixture(p, expert_outputs(x, state))
    return (F_moe, p) if return_gate else F_moe


def decode(F_moe: Tensor, state: ModelState) -> Tensor:
    """Per-slot logits ``[B, S, 13]`` from fused features ``[B, T, 3d]``."""
    cfg, P = state.config, state.params
    B = F_moe.shape[0]
    M, d, h = cfg.n_queries, cfg.d_model, cfg.n_heads
    queries = P["dec.queries"]
    q = _split_heads(tt.matmul(_ln(queries, P, "dec.ln_q"), P["dec.wq"]), h)
    kv = _ln(F_moe, P, "dec.ln_kv")
    k = _split_heads(tt.matmul(kv, P["dec.wk"]), h)
    v = _split_heads(tt.matmul(kv, P["dec.wv"]), h)
    a = tt.matmul(_merge_heads(attention(q, k, v)), P["dec.wo"])
    read = tt.add(a, queries)
    text = tt.broadcast_to(P["dec.text"], (B, cfg.n_text, d))
    tokens = tt.concat([read, text], axis=1)
    tokens = _block(tokens, P, "dec.fuse", h)
    flat = tt.reshape(tokens[:, :M], (B, M * d))
    logits = _linear(_ln(flat, P, "dec.ln_out"), P["dec.head"], P["dec.head_b"])
    return tt.reshape(logits, (B, cfg.label_slots, V))


def forward(images: np.ndarray, state: ModelState, bank: TemplateBank | None = None,
            use_kfm: bool | None = None, use_moe: bool | None = None) -> Tensor:
    """Logits for a batch. Without a cached bank, template features are recomputed in-graph."""
    cfg = state.config
    use_kfm = cfg.use_kfm if use_kfm is None else use_kfm
    use_moe = cfg.use_moe if use_moe is None else use_moe
    F_img = encode_images(images, state)
    F_enh = None
    if use_kfm:
        if bank is None:
            raise ValueError("KFM needs a template bank")
        F_t = bank.features if bank.features is not None else template_features(state, bank.images)
        F_enh = kfm_forward(F_t, F_img, state)
    if use_moe:
        fused = moe_forward(F_enh, F_img, state)
    else:
        fused = relation_input(F_enh, F_img, state)
    return decode(fused, state)


def label_targets(labels: Sequence[str], slots: int) -> tuple[np.ndarray, np.ndarray]:
    enc = [encode_label(lab, slots) for lab in labels]
    return np.stack([e[0] for e in enc]), np.stack([e[1] for e in enc])


def loss(logits: Tensor, labels: str | Sequence[str]) -> Tensor:
    """Slot-averaged cross-entropy; slots after the first EOS are masked."""
    if isinstance(labels, str):
        labels = [labels]
    if logits.ndim == 2:
        logits = tt.reshape(logits, (1, *logits.shape))
    ids, mask = label_targets(labels, logits.shape[-2])
    return tt.cross_entropy(logits, ids, mask)


def slot_probabilities(logits: Tensor) -> np.ndarray:
    z = logits.data
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_logits(logits: np.ndarray) -> list[tuple[str, float | None]]:
    """Greedy per-slot argmax -> (label, reading or None)."""
    out = []
    for row in np.asarray(logits).argmax(axis=-1):
        text = decode_ids(row)
        try:
            value = parse_label(text)
        except LabelError:
            value = None
        out.append((text, value))
    return out


def predict(img: np.ndarray, state: ModelState, bank: TemplateBank | None = None,
            spec_hint: DialSpec | None = None) -> tuple[str, float | None]:
    """Reading for one image. ``spec_hint`` is accepted for interface parity and unused."""
    return predict_batch(img[None], state, bank)[0]


def predict_batch(images: np.ndarray, state: ModelState, bank: TemplateBank | None = None,
                  batch_size: int = 64) -> list[tuple[str, float | None]]:
    out = []
    with tt.no_grad():
        for i in range(0, len(images), batch_size):
            out.extend(decode_logits(forward(images[i:i + batch_size], state, bank).data))
    return out


def with_flags(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
