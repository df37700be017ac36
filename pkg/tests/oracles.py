"""Independent brute-force implementations used to cross-check the metrics."""

from fractions import Fraction

import numpy as np

RELS = ["on", "left of", "above", "riding", "next to"]


def raster_iou(a, b, size=24):
    """IoU of integer boxes by counting covered unit cells."""
    grid = np.zeros((size, size), np.int8)
    grid[a[1]:a[3], a[0]:a[2]] += 1
    grid[b[1]:b[3], b[0]:b[2]] += 2
    inter = int((grid == 3).sum())
    union = int((grid > 0).sum())
    return Fraction(inter, union) if union else Fraction(0)


def fraction_iou(a, b):
    a, b = [Fraction(x) for x in a], [Fraction(x) for x in b]
    iw = max(Fraction(0), min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(Fraction(0), min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else Fraction(0)


def raster_merge(boxes, size=24):
    grid = np.zeros((size, size), bool)
    for b in boxes:
        grid[b[1]:b[3], b[0]:b[2]] = True
    ys, xs = np.nonzero(grid)
    return (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def rand_int_box(rng, size=24):
    x0, y0 = rng.randrange(size - 1), rng.randrange(size - 1)
    return (x0, y0, rng.randrange(x0 + 1, size + 1), rng.randrange(y0 + 1, size + 1))


def oracle_hits(preds, golds, k):
    """A gold is found when fewer than k predictions outrank its matching triplet."""
    hits = []
    for g in golds:
        found = False
        for p in preds:
            if tuple(p[:3]) != tuple(g):
                continue
            above = sum(1 for q in preds if q[3] > p[3])
            found = found or above < k
        hits.append(found)
    return hits


def oracle_recall(images, k):
    vals = [Fraction(sum(oracle_hits(p, g, k)), len(g)) for p, g in images if g]
    return sum(vals) / len(vals)


def oracle_mean_recall(images, k):
    per = {}
    for p, g in images:
        if not g:
            continue
        hits = oracle_hits(p, g, k)
        for rel in {x[1] for x in g}:
            hs = [h for x, h in zip(g, hits) if x[1] == rel]
            per.setdefault(rel, []).append(Fraction(sum(hs), len(hs)))
    vals = [sum(v) / len(v) for v in per.values()]
    return sum(vals) / len(vals)


def random_images(rng, n_images):
    images = []
    for _ in range(n_images):
        objs = rng.randrange(2, 6)
        pairs = [(s, o) for s in range(objs) for o in range(objs) if s != o]
        preds = [(s, rng.choice(RELS), o) for s, o in pairs]
        scores = rng.sample(range(10_000), len(preds))  # distinct, so ties never arise
        preds = [(*t, sc / 10_000) for t, sc in zip(preds, scores)]
        golds = [(s, rng.choice(RELS), o) for s, o in rng.sample(pairs, rng.randrange(0, min(4, len(pairs)) + 1))]
        # make some golds findable
        for j, g in enumerate(golds):
            if rng.random() < 0.6:
                idx = next(i for i, p in enumerate(preds) if p[0] == g[0] and p[2] == g[2])
                preds[idx] = (*g, preds[idx][3])
        images.append((preds, golds))
    return images
