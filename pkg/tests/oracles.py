"""Independent reference implementations used only by the tests.

Nothing here imports from the package: every oracle is a slow, explicit
re-statement of a definition, written with plain loops.
"""
import math


def scalar_lstm_step(W_x, W_h, b, h, c, x):
    """Gate equations evaluated one scalar at a time; gate order i, f, o, g."""
    H = len(h)
    D = len(x)

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    z = []
    for j in range(4 * H):
        acc = float(b[j])
        for d in range(D):
            acc += float(x[d]) * float(W_x[d][j])
        for k in range(H):
            acc += float(h[k]) * float(W_h[k][j])
        z.append(acc)
    h_new, c_new = [], []
    for k in range(H):
        i = sig(z[k])
        f = sig(z[H + k])
        o = sig(z[2 * H + k])
        g = math.tanh(z[3 * H + k])
        ck = f * float(c[k]) + i * g
        c_new.append(ck)
        h_new.append(o * math.tanh(ck))
    return h_new, c_new


def direct_returns(rewards, gamma):
    """R_t as an explicit double sum."""
    T = len(rewards)
    return [sum(gamma ** (i - t) * rewards[i] for i in range(t, T)) for t in range(T)]


def brute_force_match(preds, gts, offset, strict=False):
    """Greedy protocol simulated step by step.

    ``preds`` are ``(time, confidence)`` pairs, ``gts`` are times, all in one
    stream and one class. Returns TP flags in rank order.
    """
    remaining = list(range(len(preds)))
    ranked = []
    while remaining:
        # highest confidence, then earliest time, then input position
        best = remaining[0]
        for i in remaining[1:]:
            ti, ci = preds[i]
            tb, cb = preds[best]
            if ci > cb or (ci == cb and ti < tb):
                best = i
        ranked.append(best)
        remaining.remove(best)
    used = [False] * len(gts)
    flags = []
    for i in ranked:
        t = preds[i][0]
        pick = -1
        for j in range(len(gts)):
            if used[j]:
                continue
            dist = abs(t - gts[j])
            inside = dist < offset if strict else dist <= offset
            if not inside:
                continue
            if pick < 0:
                pick = j
                continue
            dp = abs(t - gts[pick])
            if dist < dp or (dist == dp and gts[j] < gts[pick]):
                pick = j
        if pick >= 0:
            used[pick] = True
        flags.append(pick >= 0)
    return flags


def brute_force_ap(flags, num_gt, depth=1.0):
    """Mean precision over the first ceil(depth * num_gt) true positives."""
    need = max(1, math.ceil(depth * num_gt - 1e-9))
    total = 0.0
    hits = 0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            hits += 1
            if hits <= need:
                total += hits / rank
    return total / need


def brute_force_pmap(preds, gts, offset, depth=1.0, strict=False):
    """p-mAP over classes with at least one ground truth.

    ``preds`` are ``(stream, time, class, confidence)``; ``gts`` are
    ``(stream, time, class)``. Streams are handled by offsetting times so far
    apart that no cross-stream match is possible.
    """
    streams = sorted({p[0] for p in preds} | {g[0] for g in gts})
    shift = {s: k * 10**9 for k, s in enumerate(streams)}
    classes = sorted({g[2] for g in gts})
    aps = []
    for c in classes:
        cp = [(shift[s] + t, conf) for s, t, k, conf in preds if k == c]
        # rank ties on time must stay within a stream, so break them by stream order too
        cg = [shift[s] + t for s, t, k in gts if k == c]
        aps.append(brute_force_ap(brute_force_match(cp, cg, offset, strict), len(cg), depth))
    return sum(aps) / len(aps)


def brute_force_starts(scores, threshold=0.0):
    """Conditions (argmax is an action, differs from previous argmax, beats threshold) checked per chunk."""
    out = []
    for t in range(len(scores)):
        row = list(scores[t])
        c = max(range(len(row)), key=lambda k: (row[k], -k))
        if t == 0:
            prev = 0
        else:
            last = list(scores[t - 1])
            prev = max(range(len(last)), key=lambda k: (last[k], -k))
        if c != 0 and c != prev and row[c] > threshold:
            out.append((t, c, row[c]))
    return out


def count_ratio(flag_lists):
    neg = pos = 0
    for flags in flag_lists:
        for f in flags:
            if f:
                pos += 1
            else:
                neg += 1
    return neg / pos
