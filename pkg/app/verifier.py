#!/usr/bin/env python3
"""
Lossless verification of drafted tokens.

Chains follow the classic accept-with-min(1, p/q) rule with a residual bonus.
Trees use the recursive residual scheme: siblings are tried in the order the
drafter drew them (without replacement); each rejection replaces the target by
norm(max(0, r - q)) and removes the rejected token from q.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConsistencyError, StructuralError
from tensor_math import softmax_temp

if TYPE_CHECKING:
    from draft_engine import DraftTree

logger = logging.getLogger(__name__)

RESIDUAL_EPS = 1e-9


def normalize(probs: Sequence[float]) -> np.ndarray:
    """Clip negatives to zero and rescale to unit mass"""
    p = np.clip(np.asarray(probs, dtype=np.float64), 0.0, None)
    total = p.sum()
    if total <= 0:
        raise ConsistencyError("cannot normalise a distribution with zero mass")
    return p / total


def to_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    """float64 distribution used for sampling and acceptance"""
    return normalize(softmax_temp(logits, temperature))


def sample_from(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw restricted to positive entries"""
    p = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(p)
    total = cdf[-1]
    if total <= 0:
        raise ConsistencyError("sampling from a zero-mass distribution")
    idx = int(np.searchsorted(cdf, rng.random() * total, side="right"))
    idx = min(idx, len(p) - 1)
    while p[idx] <= 0 and idx > 0:
        idx -= 1
    return idx


def residual(target: np.ndarray, draft: np.ndarray) -> Optional[np.ndarray]:
    """norm(max(0, target - draft)), or None when the residual has no mass"""
    res = np.clip(np.asarray(target, dtype=np.float64) - np.asarray(draft, dtype=np.float64), 0.0, None)
    mass = res.sum()
    if mass < RESIDUAL_EPS:
        return None
    return res / mass


def acceptance_test(p_tok: float, p_prime_tok: float, u: float) -> bool:
    """Accept when u < min(1, p/q) for the drafted token"""
    if p_prime_tok <= 0:
        raise ConsistencyError("drafted token has zero draft probability")
    return u < min(1.0, p_tok / p_prime_tok)


def bonus_distribution(p: np.ndarray, p_prime: Optional[np.ndarray], m: int, n: int) -> np.ndarray:
    """Target itself after a full acceptance, else the residual of target over draft"""
    p = np.asarray(p, dtype=np.float64)
    if m >= n or p_prime is None:
        return p
    res = residual(p, p_prime)
    return p if res is None else res


def induced_step_distribution(p: np.ndarray, p_prime: np.ndarray) -> np.ndarray:
    """Analytic marginal of one draft, accept-or-residual step"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(p_prime, dtype=np.float64)
    accept = np.minimum(p, q)
    beta = accept.sum()
    res = residual(p, q)
    if res is None:
        res = p
    return accept + (1.0 - beta) * res


def clamp_and_renormalize(q: np.ndarray, token: int) -> Optional[np.ndarray]:
    """Remove a drawn token from q; None once nothing is left"""
    q = np.array(q, dtype=np.float64)
    q[token] = 0.0
    total = q.sum()
    if total <= 0:
        return None
    return q / total


def enumerate_draw_sequences(q: np.ndarray, width: int) -> List[Tuple[Tuple[int, ...], float]]:
    """All ordered draws without replacement with their probabilities"""
    q = normalize(q)
    support = [i for i in range(len(q)) if q[i] > 0]
    k = min(width, len(support))
    out = []
    for seq in itertools.permutations(support, k):
        prob, mass = 1.0, 1.0
        for tok in seq:
            prob *= q[tok] / mass
            mass -= q[tok]
        out.append((seq, prob))
    return out


def tree_level_output_distribution(p: np.ndarray, q: np.ndarray, width: int) -> np.ndarray:
    """
    Exact output distribution of one tree level: `width` candidates drawn
    sequentially without replacement from q, then verified in draw order.
    Sums over every ordered draw; the result equals p for a lossless scheme.
    """
    p = np.asarray(p, dtype=np.float64)
    q = normalize(q)
    out = np.zeros(len(p), dtype=np.float64)
    for seq, prob in enumerate_draw_sequences(q, width):
        r, qk, reach = p, q, prob
        for token in seq:
            accept = min(1.0, r[token] / qk[token])
            out[token] += reach * accept
            reach *= 1.0 - accept
            if reach == 0.0:
                break
            res = residual(r, qk)
            if res is not None:
                r = res
            qk = clamp_and_renormalize(qk, token)
        out += reach * r
    return out


@dataclass
class VerificationOutcome:
    accepted_tokens: List[int]
    bonus_token: int
    accepted_path: List[int]  # tree node indices, root child first
    n: int
    uniforms: List[float] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.accepted_tokens)


def verify_tree(tree: "DraftTree", temperature: float, rng: np.random.Generator) -> VerificationOutcome:
    """
    Walk the tree from the root using the base logits attached to every node.
    Temperature 0 accepts the child equal to the base argmax; the bonus is the
    base argmax at the deepest accepted node.
    """
    if not tree.root_children:
        raise StructuralError("cannot verify an empty draft tree")
    if tree.root_base_logits is None:
        raise StructuralError("draft tree carries no base logits; run the verification forward first")
    accepted_tokens: List[int] = []
    path: List[int] = []
    uniforms: List[float] = []
    children = tree.root_children
    base_logits = tree.root_base_logits
    draft_probs = tree.root_probs

    while True:
        if temperature == 0:
            target = int(np.argmax(base_logits))
            chosen = next((c for c in children if tree.nodes[c].token == target), None)
            if chosen is None:
                return VerificationOutcome(accepted_tokens, target, path, tree.depth, uniforms)
        else:
            r = to_probs(base_logits, temperature)
            q = draft_probs
            chosen = None
            for c in children:
                token = tree.nodes[c].token
                if q is None or q[token] <= 0:
                    raise ConsistencyError(f"candidate {token} has zero draft probability")
                u = float(rng.random())
                uniforms.append(u)
                if acceptance_test(r[token], q[token], u):
                    chosen = c
                    break
                res = residual(r, q)
                if res is not None:
                    r = res
                q = clamp_and_renormalize(q, token)
            if chosen is None:
                bonus = sample_from(r, rng)
                return VerificationOutcome(accepted_tokens, bonus, path, tree.depth, uniforms)

        node = tree.nodes[chosen]
        accepted_tokens.append(node.token)
        path.append(chosen)
        base_logits = node.base_logits
        if not node.children:
            if temperature == 0:
                bonus = int(np.argmax(base_logits))
            else:
                bonus = sample_from(to_probs(base_logits, temperature), rng)
            return VerificationOutcome(accepted_tokens, bonus, path, tree.depth, uniforms)
        children = node.children
        draft_probs = node.draft_probs
