"""Independent slow reference implementations used by the tests."""
import math

import numpy as np


def cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def tcl_bruteforce(q, t, tau):
    """Direct double-loop evaluation with plain exp/log, no max-shifting."""
    B = len(q)
    total = 0.0
    for k in range(B):
        num = math.exp(cos(q[k], t[k]) / tau)
        den = sum(math.exp(cos(q[k], t[j]) / tau) for j in range(B))
        den += sum(math.exp(cos(t[k], t[j]) / tau) for j in range(B) if j != k)
        term1 = -math.log(num / den)
        num2 = math.exp(cos(t[k], q[k]) / tau)
        den2 = sum(math.exp(cos(t[k], q[j]) / tau) for j in range(B))
        den2 += sum(math.exp(cos(q[k], q[j]) / tau) for j in range(B) if j != k)
        term2 = -math.log(num2 / den2)
        total += term1 + term2
    return total / B


def brute_rank(query, gallery, ids, exclude=None):
    scored = []
    for g, i in zip(gallery, ids):
        if exclude is not None and i == exclude:
            continue
        scored.append((-cos(query, g), int(i)))
    scored.sort()
    return [i for _, i in scored]


def brute_recall(ranking, positives, K):
    K = min(K, len(ranking))
    return 1.0 if set(ranking[:K]) & set(positives) else 0.0


def brute_map(ranking, positives, K):
    K = min(K, len(ranking))
    precs = []
    for i in range(K):
        if ranking[i] in positives:
            precs.append(sum(1 for r in ranking[: i + 1] if r in positives) / (i + 1))
    return sum(precs) / min(len(positives), K)


def edit_bruteforce(caption, source, target, removal):
    """Token-by-token swap or deletion of ``source`` (captions are single-spaced words)."""
    out = []
    for tok in caption.split():
        if tok.lower() == source.lower():
            if not removal:
                out.append(target)
        else:
            out.append(tok)
    return " ".join(out)
