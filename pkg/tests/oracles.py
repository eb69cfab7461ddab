"""Independent explicit-loop reference implementations used as test oracles.

Everything here is written with plain Python loops and ``math`` so that it
shares no code path with the vectorised package implementation.
"""

import math

MASK64 = (1 << 64) - 1


def splitmix64_stream(seed, n):
    out = []
    state = seed & MASK64
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def temporal_deviation(a, b):
    B, P, D = len(a), len(a[0]), len(a[0][0])
    total = 0.0
    for i in range(B):
        for j in range(P):
            s = 0.0
            for d in range(D):
                diff = a[i][j][d] - b[i][j][d]
                s += diff * diff
            total += math.sqrt(s)
    return total / (B * P)


def token_std(tok):
    mu = sum(tok) / len(tok)
    return math.sqrt(sum((x - mu) ** 2 for x in tok) / len(tok))


def spatial_variation(h):
    vals = [token_std(tok) for batch in h for tok in batch]
    return sum(vals) / len(vals)


def matvec(row, m):
    cols = len(m[0])
    return [sum(row[k] * m[k][c] for k in range(len(row))) for c in range(cols)]


def layer_norm(tok, eps=1e-5):
    mu = sum(tok) / len(tok)
    var = sum((x - mu) ** 2 for x in tok) / len(tok)
    return [(x - mu) / math.sqrt(var + eps) for x in tok]


def gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def block(h, wq, wk, wv, wo, w1, w2):
    """Pre-LN single-head attention + GELU MLP, both residual, on nested lists."""
    out = []
    D = len(h[0][0])
    for tokens in h:
        normed = [layer_norm(t) for t in tokens]
        q = [matvec(t, wq) for t in normed]
        k = [matvec(t, wk) for t in normed]
        v = [matvec(t, wv) for t in normed]
        h1 = []
        for i, tok in enumerate(tokens):
            logits = [sum(q[i][d] * k[j][d] for d in range(D)) / math.sqrt(D) for j in range(len(tokens))]
            m = max(logits)
            e = [math.exp(x - m) for x in logits]
            z = sum(e)
            mixed = [sum(e[j] / z * v[j][d] for j in range(len(tokens))) for d in range(D)]
            attn = matvec(mixed, wo)
            h1.append([tok[d] + attn[d] for d in range(D)])
        res = []
        for tok in h1:
            hidden = [gelu(x) for x in matvec(layer_norm(tok), w1)]
            mlp = matvec(hidden, w2)
            res.append([tok[d] + mlp[d] for d in range(D)])
        out.append(res)
    return out


def ssim_constant_pair(mu_a, mu_b, peak=1.0):
    """SSIM of two constant images: only the luminance term survives."""
    c1 = (0.01 * peak) ** 2
    return (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)


def ema_normalized(stream, decay=0.9):
    ema = None
    result = None
    for x in stream:
        ema = x if ema is None else decay * ema + (1 - decay) * x
        result = x / ema
    return result


def reflection_period(extent, speed):
    """Frames after which a reflected 1-D motion repeats."""
    return 2 * (extent - 1) / abs(speed)
