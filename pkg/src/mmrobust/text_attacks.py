"""Character-level text attacks: VIPER, HotFlip beam search and a black-box heuristic search.

All attacks substitute characters in place, so lengths never change, and the
paired image stays clean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ces import CharEmbeddingSpace, default_ces
from .corpus import NewsSample
from .errors import ValidationError
from .rng import make_rng

METHODS = ("viper", "hotflip", "heuristic")


@dataclass(frozen=True)
class TextAttackConfig:
    method: str = "viper"
    viper_p: float = 0.4
    hotflip_beam: int = 10
    hotflip_budget: float = 0.10
    heuristic_K: int = 10
    heuristic_R: int = 30
    candidates_per_seed: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown text attack {self.method!r}; expected one of {METHODS}")
        if not 0.0 <= self.viper_p <= 1.0:
            raise ValidationError("viper_p must lie in [0, 1]")
        if not 0.0 < self.hotflip_budget <= 1.0:
            raise ValidationError("hotflip_budget must lie in (0, 1]")
        if self.hotflip_beam < 1 or self.heuristic_K < 1 or self.candidates_per_seed < 1:
            raise ValidationError("beam, K and candidates_per_seed must be >= 1")
        if self.heuristic_R < 0:
            raise ValidationError("heuristic_R must be >= 0")


@dataclass
class TextAdvResult:
    original_tokens: str
    adv_tokens: str
    flips: list[tuple[int, str, str]] = field(default_factory=list)  # (position, old, new)
    success: bool = False
    queries: int = 0
    original_pred: int | None = None
    adv_pred: int | None = None

    @property
    def positions(self) -> list[int]:
        return [pos for pos, _, _ in self.flips]


def _diff(original: str, adv: str) -> list[tuple[int, str, str]]:
    return [(i, a, b) for i, (a, b) in enumerate(zip(original, adv)) if a != b]


def allowed_flips(budget: float, length: int) -> int:
    """``ceil(budget * length)``, guarded against float noise such as 0.1 * 30."""
    return int(math.ceil(budget * length - 1e-9))


# -- VIPER ---------------------------------------------------------------------

def viper_tokens(tokens: str, p: float, ces: CharEmbeddingSpace, rng: np.random.Generator) -> str:
    """Replace each character with a uniform CES neighbour with probability ``p``.

    Characters without neighbours are skipped and draw no random numbers.
    """
    if not 0.0 <= p <= 1.0:
        raise ValidationError("p must lie in [0, 1]")
    out = list(tokens)
    for i, ch in enumerate(tokens):
        nbrs = ces.of(ch)
        if not nbrs:
            continue
        if rng.random() < p:
            out[i] = nbrs[int(rng.integers(len(nbrs)))]
    return "".join(out)


def viper(sample: NewsSample, p: float = 0.4, ces: CharEmbeddingSpace | None = None, seed: int = 0,
          detector=None) -> TextAdvResult:
    """Black-box VIPER perturbation of ``sample.tokens``.

    The attack itself never queries a model; when ``detector`` is given the
    result's predictions and success flag are filled in for reporting.
    """
    ces = ces or default_ces()
    adv = viper_tokens(sample.tokens, p, ces, make_rng(seed, "viper", sample.id))
    res = TextAdvResult(sample.tokens, adv, _diff(sample.tokens, adv))
    if detector is not None:
        pred = detector.predict(np.stack([sample.image, sample.image]), [sample.tokens, adv])
        res.original_pred, res.adv_pred = int(pred[0]), int(pred[1])
        res.success = res.adv_pred != res.original_pred
    return res


# -- HotFlip -------------------------------------------------------------------

@dataclass
class _Beam:
    tokens: str
    flipped: frozenset
    loss: float


def _shared_logits(detector, image, texts):
    if hasattr(detector, "logits_shared_image"):
        return detector.logits_shared_image(image, texts)
    return detector.logits(np.repeat(image[None], len(texts), axis=0), texts)


def _losses_and_preds(detector, image, texts, label):
    z = _shared_logits(detector, image, texts).astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    loss = np.log(np.exp(z).sum(axis=1)) - z[:, label]
    return loss, (z[:, 1] >= z[:, 0]).astype(np.int64)


def hotflip(detector, sample: NewsSample, cfg: TextAttackConfig | None = None) -> TextAdvResult:
    """White-box beam search over single-character substitutions.

    Each expansion scores every flip ``(i, a -> b)`` of a beam entry by the
    first-order estimate ``dJ/dT[i, b] - dJ/dT[i, a]``; the ``beam`` best
    estimates (ties by position, then symbol index) are re-evaluated exactly
    and ranked by true loss. At most ``ceil(budget * len)`` positions change
    and the search stops as soon as the best entry flips the prediction.
    """
    cfg = cfg or TextAttackConfig(method="hotflip")
    tokens, label, image = sample.tokens, int(sample.label), sample.image
    budget = allowed_flips(cfg.hotflip_budget, len(tokens))
    if budget < 1:
        raise ValidationError(f"budget {cfg.hotflip_budget} allows no flips on {len(tokens)} characters")
    alphabet = detector.alphabet
    index = {ch: k for k, ch in enumerate(alphabet)}
    loss0, pred0 = _losses_and_preds(detector, image, [tokens], label)
    queries = 1
    orig_pred = int(pred0[0])
    beam = [_Beam(tokens, frozenset(), float(loss0[0]))]
    best, best_pred = beam[0], orig_pred
    for _depth in range(budget):
        texts = [b.tokens for b in beam]
        _, _, tgrads = detector.input_gradients(np.repeat(image[None], len(beam), axis=0), texts,
                                                np.full(len(beam), label), text=True)
        queries += len(beam)
        cands = []  # (estimated loss, position, symbol index, beam rank)
        for rank, (b, G) in enumerate(zip(beam, tgrads)):
            cur = np.array([index[ch] for ch in b.tokens])
            est = G.astype(np.float64) - G[np.arange(len(cur)), cur][:, None].astype(np.float64) + b.loss
            est[np.arange(len(cur)), cur] = -np.inf
            if b.flipped:
                est[sorted(b.flipped)] = -np.inf
            flat = est.ravel()
            k = min(cfg.hotflip_beam, int(np.isfinite(flat).sum()))
            if k == 0:
                continue
            thresh = np.partition(flat, -k)[-k]
            for f in np.flatnonzero(flat >= thresh):
                pos, sym = divmod(int(f), est.shape[1])
                cands.append((float(flat[f]), pos, sym, rank))
        if not cands:
            break
        cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
        chosen, seen = [], set()
        for est_loss, pos, sym, rank in cands:
            b = beam[rank]
            new = b.tokens[:pos] + alphabet[sym] + b.tokens[pos + 1:]
            if new in seen:
                continue
            seen.add(new)
            chosen.append((pos, sym, _Beam(new, b.flipped | {pos}, 0.0)))
            if len(chosen) == cfg.hotflip_beam:
                break
        losses, preds = _losses_and_preds(detector, image, [c[2].tokens for c in chosen], label)
        queries += len(chosen)
        for (_, _, b), loss in zip(chosen, losses):
            b.loss = float(loss)
        order = sorted(range(len(chosen)), key=lambda j: (-chosen[j][2].loss, chosen[j][0], chosen[j][1]))
        beam = [chosen[j][2] for j in order]
        best, best_pred = beam[0], int(preds[order[0]])
        if best_pred != orig_pred:
            break
    return TextAdvResult(tokens, best.tokens, _diff(tokens, best.tokens), best_pred != orig_pred,
                         queries, orig_pred, best_pred)


# -- heuristic black-box search ------------------------------------------------

def heuristic_search(detector, sample: NewsSample, cfg: TextAttackConfig | None = None,
                     ces: CharEmbeddingSpace | None = None) -> TextAdvResult:
    """Population search using only predicted probabilities.

    K seeds start as copies of the original. Each round every seed spawns
    ``candidates_per_seed`` variants with 1-2 positions replaced by random CES
    neighbours of the original character; the K candidates or seeds with the
    lowest probability of the true class survive. Stops after R rounds or once
    the best text flips the prediction.
    """
    cfg = cfg or TextAttackConfig(method="heuristic")
    ces = ces or default_ces()
    tokens, label, image = sample.tokens, int(sample.label), sample.image
    rng = make_rng(cfg.seed, "heuristic", sample.id)

    def true_prob(texts):
        z = _shared_logits(detector, image, texts).astype(np.float64)
        p_fake = 1.0 / (1.0 + np.exp(z[:, 0] - z[:, 1]))
        return p_fake if label == 1 else 1.0 - p_fake

    p0 = true_prob([tokens])
    queries = 1
    orig_pred = detector_pred_from_prob(float(p0[0]), label)
    eligible = [i for i, ch in enumerate(tokens) if ces.of(ch)]
    seeds = [(float(p0[0]), tokens)] * cfg.heuristic_K
    best_p, best = float(p0[0]), tokens
    if cfg.heuristic_R == 0 or not eligible:
        return TextAdvResult(tokens, tokens, [], False, queries, orig_pred, orig_pred)
    for _round in range(cfg.heuristic_R):
        cands = []
        for _, text in seeds:
            for _c in range(cfg.candidates_per_seed):
                chars = list(text)
                n_pos = min(int(rng.integers(1, 3)), len(eligible))
                for pos in rng.choice(eligible, size=n_pos, replace=False):
                    nbrs = ces.of(tokens[pos])
                    chars[pos] = nbrs[int(rng.integers(len(nbrs)))]
                cands.append("".join(chars))
        probs = true_prob(cands)
        queries += len(cands)
        pool = seeds + list(zip(probs.tolist(), cands))
        # stable sort keeps earlier entries first on ties
        pool.sort(key=lambda e: e[0])
        seeds = pool[:cfg.heuristic_K]
        best_p, best = seeds[0]
        if detector_pred_from_prob(best_p, label) != orig_pred:
            break
    adv_pred = detector_pred_from_prob(best_p, label)
    return TextAdvResult(tokens, best, _diff(tokens, best), adv_pred != orig_pred, queries, orig_pred, adv_pred)


def detector_pred_from_prob(p_true: float, label: int) -> int:
    """Hard label implied by the true-class probability (ties go to fake)."""
    p_fake = p_true if label == 1 else 1.0 - p_true
    return 1 if p_fake >= 0.5 else 0


# -- dispatch ------------------------------------------------------------------

def attack_text(detector, sample: NewsSample, cfg: TextAttackConfig,
                ces: CharEmbeddingSpace | None = None) -> TextAdvResult:
    if cfg.method == "viper":
        return viper(sample, cfg.viper_p, ces, cfg.seed, detector=detector)
    if cfg.method == "hotflip":
        return hotflip(detector, sample, cfg)
    return heuristic_search(detector, sample, cfg, ces)


def attack_texts(detector, samples: Sequence[NewsSample], cfg: TextAttackConfig,
                 ces: CharEmbeddingSpace | None = None) -> list[TextAdvResult]:
    return [attack_text(detector, s, cfg, ces) for s in samples]
