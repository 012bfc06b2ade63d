"""Independent reference computations used to check the package.

Each oracle works pixel by pixel (or sign pattern by sign pattern) in plain
Python and shares no code with the implementation it checks.
"""
import itertools
import math

POS, NEG, IGNORE = 1, 0, -1


def bce_term(z, y, w):
    # -[w*y*log(sigmoid z) + (1-y)*log(1 - sigmoid z)] with log-sigmoid written out
    log_sig = -math.log1p(math.exp(-z)) if z >= 0 else z - math.log1p(math.exp(z))
    log_one_minus = -math.log1p(math.exp(z)) if z <= 0 else -z - math.log1p(math.exp(-z))
    return -(w * y * log_sig + (1 - y) * log_one_minus)


def masked_bce_reference(logits, states, weights):
    """logits/states: nested lists [b][h][w][c]; returns (per-class list or None, total)."""
    B = len(logits)
    C = len(weights)
    per_class = []
    for c in range(C):
        total = 0.0
        count = 0
        for b in range(B):
            for row_z, row_s in zip(logits[b], states[b]):
                for z_px, s_px in zip(row_z, row_s):
                    s = s_px[c]
                    if s == IGNORE:
                        continue
                    total += bce_term(z_px[c], 1.0 if s == POS else 0.0, weights[c])
                    count += 1
        per_class.append(None if count == 0 else total / B / count)
    active = [v for v in per_class if v is not None]
    return per_class, (sum(active) / len(active) if active else 0.0)


def supervision_reference(labels, annotated, n_classes):
    """Rule-by-rule states; labels is a 2-d list of class ids (-1 = none of the classes)."""
    out = []
    for row in labels:
        out_row = []
        for lab in row:
            px = []
            for c in range(n_classes):
                if c in annotated:
                    px.append(POS if lab == c else NEG)  # annotated: mask value decides
                elif lab != -1 and lab != c and lab in annotated:
                    px.append(NEG)  # rule 1: another class is positive here
                else:
                    px.append(IGNORE)  # rule 2: unknown
            out_row.append(px)
        out.append(out_row)
    return out


def dice_sets(pred_cells, gt_cells):
    p, g = set(pred_cells), set(gt_cells)
    if not p and not g:
        return 1.0
    return 2 * len(p & g) / (len(p) + len(g))


def wilcoxon_enumeration(a, b):
    """Two-sided p-value from every sign assignment of the non-zero differences."""
    d = [x - y for x, y in zip(a, b) if x != y]
    n = len(d)
    mags = sorted(abs(v) for v in d)
    # doubled average ranks keep tied ranks integral
    rank2 = {}
    i = 0
    while i < n:
        j = i
        while j + 1 < n and mags[j + 1] == mags[i]:
            j += 1
        rank2[mags[i]] = (i + 1) + (j + 1)
        i = j + 1
    r = [rank2[abs(v)] for v in d]
    total = sum(r)
    observed = sum(ri for ri, v in zip(r, d) if v > 0)
    dev = abs(2 * observed - total)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(ri for ri, s in zip(r, signs) if s)
        if abs(2 * w - total) >= dev:
            hits += 1
    return hits / 2**n
