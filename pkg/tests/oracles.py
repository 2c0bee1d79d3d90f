"""Slow scalar reference implementations, written independently of the package.

Nothing here imports planeseg; each function is a plain loop over the
definition so that vectorized code can be checked against it.
"""

import math

import numpy as np


def iou_scalar(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def cos_scalar(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def column_max_loop(boxes):
    n = len(boxes)
    k = [0.0] * n
    for j in range(n):
        for i in range(j):
            k[j] = max(k[j], iou_scalar(boxes[i], boxes[j]))
    return k


def fast_nms_loop(boxes, thr):
    k = column_max_loop(boxes)
    return [j for j in range(len(boxes)) if k[j] <= thr]


def ff_nms_loop(boxes, coeffs, n1, n2, t):
    """Line-by-line transcription of Fast Feature NMS for one class."""
    k = column_max_loop(boxes)
    kept = []
    for j in range(len(boxes)):
        if k[j] <= n1:
            kept.append(j)
        elif k[j] <= n2:
            s = max(cos_scalar(coeffs[j], coeffs[d]) for d in kept)
            if s <= t:
                kept.append(j)
    return kept


def assemble_loop(protos, coeffs):
    h, w, k = protos.shape
    out = np.zeros((len(coeffs), h, w))
    for n in range(len(coeffs)):
        for y in range(h):
            for x in range(w):
                z = 0.0
                for c in range(k):
                    z += protos[y, x, c] * coeffs[n, c]
                out[n, y, x] = 1.0 / (1.0 + math.exp(-z))
    return out


def conv_loop(f, kernel, bias):
    c_in, h, w = f.shape
    c_out, _, s, _ = kernel.shape
    pad = s // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for y in range(h):
            for x in range(w):
                acc = bias[o]
                for c in range(c_in):
                    for dy in range(s):
                        for dx in range(s):
                            yy, xx = y + dy - pad, x + dx - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += kernel[o, c, dy, dx] * f[c, yy, xx]
                out[o, y, x] = acc
    return out


def adaptive_pool_loop(f, out_h, out_w):
    c, h, w = f.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        y0 = math.floor(i * h / out_h)
        y1 = math.ceil((i + 1) * h / out_h)
        for j in range(out_w):
            x0 = math.floor(j * w / out_w)
            x1 = math.ceil((j + 1) * w / out_w)
            for ch in range(c):
                out[ch, i, j] = np.mean(f[ch, y0:y1, x0:x1])
    return out


def upsample_loop(f, out_h, out_w):
    c, h, w = f.shape
    out = np.zeros((c, out_h, out_w))
    for y in range(out_h):
        sy = min(max((y + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for x in range(out_w):
            sx = min(max((x + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            for ch in range(c):
                out[ch, y, x] = ((1 - wy) * ((1 - wx) * f[ch, y0, x0] + wx * f[ch, y0, x1])
                                 + wy * ((1 - wx) * f[ch, y1, x0] + wx * f[ch, y1, x1]))
    return out


def pair_counts(a, b):
    """(pairs together in both, together only in a, only in b, apart in both)."""
    a = np.ravel(a)
    b = np.ravel(b)
    both = only_a = only_b = neither = 0
    for i in range(len(a)):
        for j in range(i + 1, len(a)):
            sa = a[i] == a[j]
            sb = b[i] == b[j]
            if sa and sb:
                both += 1
            elif sa:
                only_a += 1
            elif sb:
                only_b += 1
            else:
                neither += 1
    return both, only_a, only_b, neither


def rand_index_pairs(a, b):
    both, only_a, only_b, neither = pair_counts(a, b)
    total = both + only_a + only_b + neither
    return 1.0 if total == 0 else (both + neither) / total


def voi_counts(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    n = len(a)
    joint, ca, cb = {}, {}, {}
    for x, y in zip(a.tolist(), b.tolist()):
        joint[(x, y)] = joint.get((x, y), 0) + 1
        ca[x] = ca.get(x, 0) + 1
        cb[y] = cb.get(y, 0) + 1
    voi = 0.0
    for (x, y), nxy in joint.items():
        pxy = nxy / n
        voi -= pxy * (math.log(pxy / (ca[x] / n)) + math.log(pxy / (cb[y] / n)))
    return voi


def covering_loop(gt, pred):
    gt = np.ravel(gt)
    pred = np.ravel(pred)
    total = 0.0
    for g in np.unique(gt):
        gm = gt == g
        best = 0.0
        for p in np.unique(pred):
            pm = pred == p
            best = max(best, np.sum(gm & pm) / np.sum(gm | pm))
        total += gm.sum() * best
    return total / len(gt)


def loss_loop(matches, logits, gt_labels, box_pred, box_gt, mask_pred, mask_gt,
              alpha, beta, eps=1e-7):
    """Composite detection loss with explicit loops and 3:1 hard-negative mining."""
    p_count, g_count = matches.shape
    pos = []
    for p in range(p_count):
        for g in range(g_count):
            if matches[p, g]:
                pos.append((p, g))
    n = len(pos)

    def log_softmax_row(row):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        return [v - lse for v in row]

    l_loc = 0.0
    l_conf = 0.0
    l_mask = 0.0
    for p, g in pos:
        for c in range(4):
            d = abs(box_pred[p, c] - box_gt[g, c])
            l_loc += 0.5 * d * d if d < 1 else d - 0.5
        l_conf -= log_softmax_row(list(logits[p]))[gt_labels[g]]
        if mask_pred is not None:
            acc = 0.0
            for y in range(mask_pred.shape[1]):
                for x in range(mask_pred.shape[2]):
                    q = min(max(mask_pred[p, y, x], eps), 1 - eps)
                    t = mask_gt[g, y, x]
                    acc -= t * math.log(q) + (1 - t) * math.log(1 - q)
            l_mask += acc / (mask_pred.shape[1] * mask_pred.shape[2])
    neg = []
    for p in range(p_count):
        if not any(matches[p]):
            neg.append((-log_softmax_row(list(logits[p]))[0], p))
    # highest background loss first, ties by prior index
    neg.sort(key=lambda e: (-e[0], e[1]))
    for loss, _ in neg[: 3 * n]:
        l_conf += loss
    return (l_conf + alpha * l_loc + beta * l_mask) / n


def asf_loop(features, w):
    stacked = np.concatenate(features, axis=0)
    hidden = conv_loop(stacked, w.asf_kernel1, w.asf_bias1)
    logits = conv_loop(hidden, w.asf_kernel2, w.asf_bias2)
    _, h, wd = features[0].shape
    out = np.zeros_like(features[0])
    for y in range(h):
        for x in range(wd):
            z = [math.exp(v) for v in logits[:, y, x] - logits[:, y, x].max()]
            s = sum(z)
            for i, f in enumerate(features):
                out[:, y, x] += z[i] / s * f[:, y, x]
    return out


def rfa_loop(c5, lateral, w, cfg):
    _, h, wd = c5.shape
    contexts = []
    for ratio, k, b in zip(cfg.ratios, w.proj_kernels, w.proj_biases):
        oh = max(1, math.floor(ratio * h + 0.5))
        ow = max(1, math.floor(ratio * wd + 0.5))
        pooled = adaptive_pool_loop(c5, oh, ow)
        contexts.append(upsample_loop(conv_loop(pooled, k, b), h, wd))
    return conv_loop(lateral + asf_loop(contexts, w), w.out_kernel, w.out_bias)
