"""Report quality metrics and the frozen-feature progression probe.

Three families live here: n-gram text overlap scores (BLEU-n without
smoothing, ROUGE-L, and an exact-match METEOR variant), clinical-efficacy
style label metrics driven by a total parser over the report template
grammar, and a linear probe that measures how much progression signal a
frozen feature space carries.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamWState,
    DiffTensor,
    SeededRng,
    Tape,
    adamw_step,
    backward,
    cross_entropy_loss,
    matmul,
)
from .errors import ContractViolation
from .synthdata import COMPARATIVES, FINDINGS, PROGRESSIONS

# ---------------------------------------------------------------------------
# N-gram overlap
# ---------------------------------------------------------------------------


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, reference, n=4):
    """Geometric mean of clipped n-gram precisions with brevity penalty.

    No smoothing: a zero precision at any order zeroes the score. The
    brevity penalty exp(1 - |ref|/|cand|) applies when the candidate is
    shorter than the reference.
    """
    if not 1 <= n <= 4:
        raise ContractViolation(f"n must lie in 1..4, got {n}")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        cand_counts = _ngrams(candidate, k)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        ref_counts = _ngrams(reference, k)
        clipped = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += np.log(clipped / total)
    score = float(np.exp(log_sum / n))
    if len(candidate) < len(reference):
        score *= float(np.exp(1.0 - len(reference) / len(candidate)))
    return score


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


ROUGE_BETA = 1.2


def rouge_l(candidate, reference):
    """Longest-common-subsequence F-score with beta = 1.2."""
    if not reference:
        raise ContractViolation("rouge_l needs a non-empty reference")
    if not candidate:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    b2 = ROUGE_BETA**2
    return float((1 + b2) * p * r / (r + b2 * p))


METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5


def _align_chunks(candidate, reference):
    """Greedy longest-common-substring alignment; returns (matches, chunks).

    Repeatedly consumes the longest run of identical consecutive tokens
    available on both sides; each consumed run is one chunk. Greedy rather
    than exhaustive, which is exact on template-style text.
    """
    c_used = [False] * len(candidate)
    r_used = [False] * len(reference)
    matches = chunks = 0
    while True:
        best_len, best = 0, None
        for i in range(len(candidate)):
            for j in range(len(reference)):
                length = 0
                while (
                    i + length < len(candidate)
                    and j + length < len(reference)
                    and not c_used[i + length]
                    and not r_used[j + length]
                    and candidate[i + length] == reference[j + length]
                ):
                    length += 1
                if length > best_len:
                    best_len, best = length, (i, j)
        if best_len == 0:
            return matches, chunks
        i, j = best
        for k in range(best_len):
            c_used[i + k] = True
            r_used[j + k] = True
        matches += best_len
        chunks += 1


def meteor_em(candidate, reference):
    """Exact-match METEOR: harmonic precision/recall mean with a chunk penalty.

    F = P*R / (alpha*P + (1-alpha)*R); penalty = gamma*(chunks/matches)^3.
    No stemming or synonymy — matching is literal token equality.
    """
    if not reference:
        raise ContractViolation("meteor_em needs a non-empty reference")
    if not candidate:
        return 0.0
    matches, chunks = _align_chunks(candidate, reference)
    if matches == 0:
        return 0.0
    p = matches / len(candidate)
    r = matches / len(reference)
    f_mean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (chunks / matches) ** 3
    return float(f_mean * (1.0 - penalty))


def corpus_mean(metric, candidates, references, **kw):
    """Corpus score = mean of per-report scores."""
    if len(candidates) != len(references):
        raise ContractViolation("candidate and reference lists must align")
    if not candidates:
        return 0.0
    return float(np.mean([metric(c, r, **kw) for c, r in zip(candidates, references)]))


# ---------------------------------------------------------------------------
# Label extraction and CE-style metrics
# ---------------------------------------------------------------------------

_COMP_TO_PROG = {"improved": "improving", "unchanged": "stable", "worsened": "worsening"}
_SEVERITY_WORDS = {"0", "1", "2", "3"}


@dataclass
class CEReportLabels:
    """Parsed labels: finding -> (severity, progression-or-None)."""

    findings: dict

    def present(self, finding):
        sev, _ = self.findings.get(finding, (0, None))
        return sev > 0

    def comparative(self, finding):
        return self.findings.get(finding, (0, None))[1]


def extract_ce_labels(report):
    """Total parser over "<finding> severity <k> [comparative]" fragments.

    Anything that does not match the grammar is skipped; the first mention
    of a finding wins. Never raises.
    """
    tokens = str(report).lower().split()
    found = {}
    i = 0
    while i < len(tokens):
        t = tokens[i]
        if (
            t in FINDINGS
            and t not in found
            and i + 2 < len(tokens)
            and tokens[i + 1] == "severity"
            and tokens[i + 2] in _SEVERITY_WORDS
        ):
            sev = int(tokens[i + 2])
            comp = None
            i += 3
            if i < len(tokens) and tokens[i] in _COMP_TO_PROG:
                comp = _COMP_TO_PROG[tokens[i]]
                i += 1
            found[t] = (sev, comp)
        else:
            i += 1
    return CEReportLabels(found)


def ce_prf(predicted, gold):
    """Macro precision/recall/F1 of finding presence, over supported findings.

    Presence means severity > 0. A finding is supported when the gold set
    contains at least one positive; unsupported findings are excluded from
    the macro average. Conventions: P=0 with no predicted positives, R=0
    with no gold positives, F1=0 when P+R=0.
    """
    if len(predicted) != len(gold):
        raise ContractViolation("predicted and gold label lists must align")
    per_p, per_r, per_f = [], [], []
    for f in FINDINGS:
        gold_pos = [g.present(f) for g in gold]
        if not any(gold_pos):
            continue
        pred_pos = [p.present(f) for p in predicted]
        tp = sum(1 for a, b in zip(pred_pos, gold_pos) if a and b)
        fp = sum(1 for a, b in zip(pred_pos, gold_pos) if a and not b)
        fn = sum(1 for a, b in zip(pred_pos, gold_pos) if not a and b)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        per_p.append(p)
        per_r.append(r)
        per_f.append(f1)
    if not per_f:
        warnings.warn("ce_prf: no finding has gold support", RuntimeWarning)
        return 0.0, 0.0, 0.0
    return float(np.mean(per_p)), float(np.mean(per_r)), float(np.mean(per_f))


def comparative_accuracy(predicted, gold):
    """Accuracy of comparative words on items where gold carries one.

    An item is one (record, finding) with a gold comparative label; the
    prediction is correct only if it mentions the finding with the same
    comparative. Returns (accuracy, n_items).
    """
    if len(predicted) != len(gold):
        raise ContractViolation("predicted and gold label lists must align")
    correct = total = 0
    for p, g in zip(predicted, gold):
        for f in FINDINGS:
            want = g.comparative(f)
            if want is None:
                continue
            total += 1
            if p.comparative(f) == want:
                correct += 1
    return (correct / total if total else 0.0), total


def majority_comparative_rate(gold):
    """Frequency of the most common gold comparative class."""
    counts = Counter()
    for g in gold:
        for f in FINDINGS:
            want = g.comparative(f)
            if want is not None:
                counts[want] += 1
    total = sum(counts.values())
    return (max(counts.values()) / total if total else 0.0)


# ---------------------------------------------------------------------------
# Progression probe
# ---------------------------------------------------------------------------

PROBE_EPOCHS = 200
PROBE_LR = 1e-2
PROBE_BATCH = 32


@dataclass
class ProbeDataset:
    """Frozen feature rows with one progression label per finding.

    Labels index into PROGRESSIONS (0 improving, 1 stable, 2 worsening).
    """

    features: np.ndarray  # [N, D]
    labels: np.ndarray  # [N, n_findings]
    findings: tuple = FINDINGS

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise ContractViolation("probe features and labels must be 2-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ContractViolation("feature and label row counts differ")
        if self.labels.shape[1] != len(self.findings):
            raise ContractViolation("one label column per finding required")


def _train_linear_probe(x_train, y_train, rng, epochs=PROBE_EPOCHS, lr=PROBE_LR):
    d = x_train.shape[1]
    w = DiffTensor(rng.normal((d, len(PROGRESSIONS)), std=0.01), requires_grad=True)
    b = DiffTensor(np.zeros(len(PROGRESSIONS)), requires_grad=True)
    x = DiffTensor(x_train)
    params = {"w": w, "b": b}
    state = AdamWState(lr=lr)
    for _ in range(epochs):
        tape = Tape()
        with tape:
            loss = cross_entropy_loss(matmul(x, w) + b, y_train)
        backward(tape, loss)
        adamw_step(params, {k: p.grad for k, p in params.items()}, state)
    return w.data, b.data


def progression_probe(dataset, splits, rng):
    """Per-finding macro-accuracy of linear classifiers on frozen features.

    One softmax classifier per finding, trained on the train split only.
    Features are standardized with train-split statistics first, since
    frozen representations carry arbitrary scales. Macro-accuracy is the
    mean of per-class accuracies on the test split; classes absent from
    the train split are excluded with a warning.
    """
    train_idx, test_idx = (np.asarray(ix, dtype=np.intp) for ix in splits)
    if train_idx.size == 0 or test_idx.size == 0:
        raise ContractViolation("probe needs non-empty train and test splits")
    mu = dataset.features[train_idx].mean(axis=0)
    sd = dataset.features[train_idx].std(axis=0) + 1e-8
    feats = (dataset.features - mu) / sd
    out = {}
    for k, name in enumerate(dataset.findings):
        y_tr = dataset.labels[train_idx, k]
        y_te = dataset.labels[test_idx, k]
        present = set(int(c) for c in np.unique(y_tr))
        missing = [PROGRESSIONS[c] for c in range(len(PROGRESSIONS)) if c not in present]
        if missing:
            warnings.warn(
                f"probe[{name}]: classes absent from train split: {missing}", RuntimeWarning
            )
        w, b = _train_linear_probe(feats[train_idx], y_tr, rng.spawn(k))
        pred = np.argmax(feats[test_idx] @ w + b, axis=1)
        accs = []
        for c in sorted(present):
            sel = y_te == c
            if sel.any():
                accs.append(float((pred[sel] == c).mean()))
        out[name] = float(np.mean(accs)) if accs else 0.0
    return out
