"""Fusion detector: char-CNN text extractor, two-layer conv image extractor, MLP head.

Shapes for a batch of ``n`` samples with hidden size ``p``::

    text   ids[n, L] -> embed[n, L, e] -> conv1d -> leaky -> mean-pool -> affine -> leaky -> R_T[n, p]
    image  x[n, 3, H, W] -> conv3x3 -> leaky -> conv3x3 -> leaky -> flatten -> affine -> leaky -> R_I[n, p]
    fuse   R = [R_T, R_I]            (concat)
           R = [R_T, a * R_I]        (attention; a = sigmoid(R_T w + b) per sample)
    head   R -> affine(2p, p) -> leaky -> affine(p, 2) -> logits   (class 1 = fake)
    event  grad_reverse(R / |R|) -> affine(2p, n_events)           (optional)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from ..autograd import Graph, Tensor
from ..errors import UnknownSymbolError, ValidationError
from ..rng import make_rng

FUSIONS = ("concat", "attention")
INFERENCE_CHUNK = 256


@dataclass(frozen=True)
class DetectorConfig:
    fusion: str = "concat"
    event_head: bool = False
    hidden: int = 32
    dropout: float = 0.5
    lr: float = 1e-3
    batch: int = 128
    epochs: int = 30
    slope: float = 0.01
    grl_lambda: float = 1.0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    embed_dim: int = 16
    text_channels: int = 32
    image_channels: tuple[int, int] = (4, 8)
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValidationError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.hidden < 1:
            raise ValidationError("hidden size must be >= 1")
        if not 0.0 < self.slope < 1.0:
            raise ValidationError("leaky slope must lie in (0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.batch < 1 or self.epochs < 0:
            raise ValidationError("batch must be >= 1 and epochs >= 0")
        object.__setattr__(self, "image_channels", tuple(self.image_channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_channels"] = list(self.image_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown detector config keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FeatureBundle:
    text: np.ndarray    # R_T [n, p]
    image: np.ndarray   # R_I [n, p]
    fused: np.ndarray   # R   [n, 2p]
    gate: np.ndarray | None = None  # attention gate [n] when fusion == "attention"


@dataclass(eq=False)
class DetectorParams:
    """All trainable weights of one detector plus what is needed to run it."""

    config: DetectorConfig
    alphabet: tuple[str, ...]
    image_shape: tuple[int, int, int]
    weights: dict[str, np.ndarray]
    n_events: int = 0
    train_seed: int = 0
    _index: dict[str, int] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.alphabet = tuple(self.alphabet)
        self.image_shape = tuple(self.image_shape)
        self._index = {ch: i for i, ch in enumerate(self.alphabet)}

    # -- encoding -------------------------------------------------------------

    def encode(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Texts -> (ids[n, L] padded with -1, lengths[n])."""
        lengths = np.array([len(t) for t in texts], dtype=np.int64)
        if len(texts) and lengths.min() < 1:
            raise ValidationError("texts must contain at least one symbol")
        L = int(lengths.max()) if len(texts) else 1
        ids = np.full((len(texts), L), -1, dtype=np.int64)
        index = self._index
        for r, t in enumerate(texts):
            try:
                ids[r, :len(t)] = [index[ch] for ch in t]
            except KeyError as exc:
                raise UnknownSymbolError(f"symbol {exc.args[0]!r} is not in the detector alphabet") from None
        return ids, lengths

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.config, self.alphabet, self.image_shape,
                              {k: v.copy() for k, v in self.weights.items()}, self.n_events, self.train_seed)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.weights.values())

    # -- inference ------------------------------------------------------------

    def _chunks(self, n: int):
        for start in range(0, n, INFERENCE_CHUNK):
            yield slice(start, min(n, start + INFERENCE_CHUNK))

    def logits(self, images: np.ndarray, texts: Sequence[str]) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = np.zeros((len(texts), 2), dtype=np.float32)
        for sl in self._chunks(len(texts)):
            ids, lengths = self.encode(texts[sl])
            g = Graph()
            fwd = forward(g, self, images[sl], ids, lengths, requires_grad=False)
            out[sl] = fwd.logits.data
        return out

    def logits_shared_image(self, image: np.ndarray, texts: Sequence[str]) -> np.ndarray:
        """Logits for many texts paired with one image; the image path runs once."""
        g = Graph()
        L = {k: g.constant(v) for k, v in self.weights.items()}
        r_image = _image_path(g, L, g.constant(np.asarray(image, np.float32)[None]), self.config.slope).data
        out = np.zeros((len(texts), 2), dtype=np.float32)
        for sl in self._chunks(len(texts)):
            ids, lengths = self.encode(texts[sl])
            _, r_text = _text_path(g, L, ids, lengths, self.config.slope)
            ri = g.constant(np.repeat(r_image, len(ids), axis=0))
            fused, _ = _fuse(g, L, self.config.fusion, r_text, ri)
            hdn = g.leaky_relu(g.affine(fused, L["head1"], L["head1_b"]), self.config.slope)
            out[sl] = g.affine(hdn, L["head2"], L["head2_b"]).data
        return out

    def predict_proba(self, images: np.ndarray, texts: Sequence[str]) -> np.ndarray:
        """Probability of the fake class per sample."""
        z = self.logits(images, texts).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p[:, 1] / p.sum(axis=1)

    def predict(self, images: np.ndarray, texts: Sequence[str]) -> np.ndarray:
        """Hard labels; fake iff P(fake) >= 0.5, i.e. logit(fake) >= logit(real)."""
        z = self.logits(images, texts)
        return (z[:, 1] >= z[:, 0]).astype(np.int64)

    def features(self, images: np.ndarray, texts: Sequence[str]) -> FeatureBundle:
        images = np.asarray(images, dtype=np.float32)
        parts: dict[str, list] = {"text": [], "image": [], "fused": [], "gate": []}
        for sl in self._chunks(len(texts)):
            ids, lengths = self.encode(texts[sl])
            g = Graph()
            fwd = forward(g, self, images[sl], ids, lengths, requires_grad=False)
            parts["text"].append(fwd.r_text.data)
            parts["image"].append(fwd.r_image.data)
            parts["fused"].append(fwd.fused.data)
            if fwd.gate is not None:
                parts["gate"].append(fwd.gate.data[:, 0])
        p = self.config.hidden
        cat = {k: (np.concatenate(v) if v else np.zeros((0, p if k != "fused" else 2 * p), np.float32))
               for k, v in parts.items() if k != "gate"}
        gate = np.concatenate(parts["gate"]) if parts["gate"] else None
        return FeatureBundle(cat["text"], cat["image"], cat["fused"], gate)

    # -- gradients with respect to inputs -------------------------------------

    def input_gradients(self, images: np.ndarray, texts: Sequence[str], labels, *, text: bool = True):
        """Per-sample cross-entropy and its gradients with respect to the inputs.

        Returns ``(loss[n], image_grad[n, 3, H, W], text_grad)`` where
        ``text_grad[i]`` is ``[len_i, |alphabet|]``: the derivative of sample
        i's loss with respect to its one-hot character matrix. ``text_grad``
        is ``None`` when ``text=False``.
        """
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        n = len(texts)
        losses = np.zeros(n, dtype=np.float32)
        img_grad = np.zeros_like(images)
        txt_grad: list[np.ndarray] | None = [] if text else None
        E = self.weights["embed"]
        for sl in self._chunks(n):
            ids, lengths = self.encode(texts[sl])
            g = Graph()
            fwd = forward(g, self, images[sl], ids, lengths, requires_grad=False,
                          image_grad=True, embed_grad=text)
            per = per_sample_ce(fwd.logits.data, labels[sl])
            losses[sl] = per
            loss = g.softmax_ce(fwd.logits, labels[sl], reduction="sum")
            g.backward(loss)
            img_grad[sl] = fwd.image_input.grad
            if text:
                ge = fwd.embedded.grad  # [m, L, e]
                for r, ln in enumerate(lengths):
                    txt_grad.append(ge[r, :ln] @ E.T)
        return losses, img_grad, txt_grad

    def margin_gradients(self, images: np.ndarray, texts: Sequence[str]):
        """``f = logit(fake) - logit(real)`` per sample and ``df/dimage``."""
        images = np.asarray(images, dtype=np.float32)
        n = len(texts)
        f = np.zeros(n, dtype=np.float32)
        grad = np.zeros_like(images)
        for sl in self._chunks(n):
            ids, lengths = self.encode(texts[sl])
            g = Graph()
            fwd = forward(g, self, images[sl], ids, lengths, requires_grad=False, image_grad=True)
            m = g.margin(fwd.logits)
            g.backward(g.sum(m))
            f[sl] = m.data
            grad[sl] = fwd.image_input.grad
        return f, grad

    def embedding_gradients(self, images: np.ndarray, texts: Sequence[str], labels):
        """Gradient of per-sample loss with respect to the embedded text ``[n, L, e]``."""
        ids, lengths = self.encode(texts)
        g = Graph()
        fwd = forward(g, self, np.asarray(images, np.float32), ids, lengths, requires_grad=False,
                      embed_grad=True)
        g.backward(g.softmax_ce(fwd.logits, np.asarray(labels, np.int64), reduction="sum"))
        return fwd.embedded.grad, ids, lengths


def per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return (lse - z[np.arange(len(labels)), labels]).astype(np.float32)


# -- construction ---------------------------------------------------------------

def init_params(config: DetectorConfig, alphabet: Sequence[str], image_shape=(3, 32, 32),
                n_events: int = 0, seed: int | None = None) -> DetectorParams:
    """Randomly initialised detector (He-normal for leaky layers, small output layer)."""
    seed = config.seed if seed is None else seed
    rng = make_rng(seed, "init")
    c, h, w = image_shape
    c1, c2 = config.image_channels
    p, e, tc = config.hidden, config.embed_dim, config.text_channels
    flat = c2 * (h - 4) * (w - 4)

    def he(shape, fan_in, gain=2.0):
        return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(np.float32)

    W = {
        "embed": (rng.standard_normal((len(alphabet), e)) * 0.5).astype(np.float32),
        "text_conv": he((tc, e, 3), 3 * e),
        "text_conv_b": np.zeros(tc, np.float32),
        "text_fc": he((tc, p), tc),
        "text_fc_b": np.zeros(p, np.float32),
        "img_conv1": he((c1, c, 3, 3), 9 * c),
        "img_conv1_b": np.zeros(c1, np.float32),
        "img_conv2": he((c2, c1, 3, 3), 9 * c1),
        "img_conv2_b": np.zeros(c2, np.float32),
        "img_fc": he((flat, p), flat),
        "img_fc_b": np.zeros(p, np.float32),
        "head1": he((2 * p, p), 2 * p),
        "head1_b": np.zeros(p, np.float32),
        "head2": he((p, 2), p, gain=0.01),
        "head2_b": np.zeros(2, np.float32),
    }
    if config.fusion == "attention":
        W["gate"] = he((p, 1), p, gain=0.1)
        W["gate_b"] = np.zeros(1, np.float32)
    if config.event_head:
        if n_events < 2:
            raise ValidationError("event head needs at least two events")
        W["event"] = he((2 * p, n_events), 2 * p, gain=0.1)
        W["event_b"] = np.zeros(n_events, np.float32)
    return DetectorParams(config, tuple(alphabet), tuple(image_shape), W, n_events, seed)


@dataclass
class Forward:
    graph: Graph
    leaves: dict[str, Tensor]
    image_input: Tensor
    embedded: Tensor
    r_text: Tensor
    r_image: Tensor
    fused: Tensor
    logits: Tensor
    gate: Tensor | None = None
    event_logits: Tensor | None = None


def _text_path(g: Graph, L: dict, ids, lengths, slope, embed_grad=False, embed_delta=None):
    emb = g.embedding(L["embed"], ids)
    if embed_grad or embed_delta is not None:
        delta = np.zeros(emb.shape) if embed_delta is None else embed_delta
        emb = g.add(emb, g.leaf(delta, requires_grad=embed_grad, name="embed_delta"))
    t = g.leaky_relu(g.conv1d(emb, L["text_conv"], L["text_conv_b"]), slope)
    t = g.mean_pool(t, lengths)
    return emb, g.leaky_relu(g.affine(t, L["text_fc"], L["text_fc_b"]), slope)


def _image_path(g: Graph, L: dict, x: Tensor, slope) -> Tensor:
    v = g.leaky_relu(g.conv2d(x, L["img_conv1"], L["img_conv1_b"]), slope)
    v = g.leaky_relu(g.conv2d(v, L["img_conv2"], L["img_conv2_b"]), slope)
    v = g.reshape(v, (v.shape[0], -1))
    return g.leaky_relu(g.affine(v, L["img_fc"], L["img_fc_b"]), slope)


def _fuse(g: Graph, L: dict, fusion: str, r_text: Tensor, r_image: Tensor):
    """Concatenation, or attention: a sigmoid gate computed from R_T scales R_I."""
    if fusion == "attention":
        gate = g.sigmoid(g.affine(r_text, L["gate"], L["gate_b"]))
        return g.concat([r_text, g.row_scale(r_image, gate)]), gate
    return g.concat([r_text, r_image]), None


def forward(g: Graph, params: DetectorParams, images: np.ndarray, ids: np.ndarray, lengths: np.ndarray, *,
            requires_grad: bool = True, image_grad: bool = False, embed_grad: bool = False,
            dropout_rng: np.random.Generator | None = None, embed_delta: np.ndarray | None = None) -> Forward:
    """Record one forward pass on ``g``.

    ``dropout_rng`` switches dropout on (training); ``embed_delta`` is added to
    the embedded text (embedding-space perturbations).
    """
    cfg = params.config
    expect = params.image_shape
    if images.ndim != 4 or tuple(images.shape[1:]) != expect:
        raise ValidationError(f"images must be [n, {expect[0]}, {expect[1]}, {expect[2]}], got {list(images.shape)}")
    L = {k: g.leaf(v, requires_grad=requires_grad, name=k) for k, v in params.weights.items()}
    slope = cfg.slope

    emb, r_text = _text_path(g, L, ids, lengths, slope, embed_grad, embed_delta)
    x = g.leaf(images, requires_grad=image_grad, name="image")
    r_image = _image_path(g, L, x, slope)

    fused, gate = _fuse(g, L, cfg.fusion, r_text, r_image)

    def drop(t: Tensor) -> Tensor:
        if dropout_rng is None or cfg.dropout == 0.0:
            return t
        keep = dropout_rng.random(t.shape) >= cfg.dropout
        return g.mul_const(t, keep / (1.0 - cfg.dropout))

    hdn = g.leaky_relu(g.affine(drop(fused), L["head1"], L["head1_b"]), slope)
    logits = g.affine(drop(hdn), L["head2"], L["head2_b"])

    event_logits = None
    if cfg.event_head and "event" in L:
        # the event head sees unit-length features so extractors cannot raise its loss by scaling R
        event_logits = g.affine(g.grad_reverse(g.l2_normalize(fused), cfg.grl_lambda), L["event"], L["event_b"])
    fwd = Forward(g, L, x, emb, r_text, r_image, fused, logits, gate, event_logits)
    return fwd
