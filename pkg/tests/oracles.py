"""Independent reference implementations used to check the library.

Nothing here imports library code paths beyond plain data types; each oracle
is written the slow, obvious way.
"""

import math

import mpmath


def filter_oracle(confidences, tau):
    kept = []
    for i in range(len(confidences)):
        if not (confidences[i] < tau):
            kept.append(i)
    return kept


def crop_oracle(pixels: bytes, width: int, height: int, channels: int, x: int, y: int, w: int, h: int):
    """Clamp then copy pixel by pixel; returns (x, y, w, h, bytes) or None."""
    x0 = x if x > 0 else 0
    y0 = y if y > 0 else 0
    x1 = x + w if x + w < width else width
    y1 = y + h if y + h < height else height
    if x1 <= x0 or y1 <= y0:
        return None
    out = bytearray()
    for row in range(y0, y1):
        for col in range(x0, x1):
            for ch in range(channels):
                out.append(pixels[(row * width + col) * channels + ch])
    return x0, y0, x1 - x0, y1 - y0, bytes(out)


def frames_to_eps_oracle(loop_gain, e0, eps, dps=50):
    """ceil(ln(eps/e0) / ln|1 - loop_gain|) in arbitrary precision."""
    with mpmath.workdps(dps):
        lg = mpmath.mpf(loop_gain)
        val = mpmath.log(mpmath.mpf(eps) / mpmath.mpf(e0)) / mpmath.log(abs(1 - lg))
        return int(mpmath.ceil(val))


def first_crossing(e0, loop_gain, eps, limit=100000):
    """Step the scalar recursion e <- (1 - loop_gain) e until |e| <= eps."""
    e = e0
    for t in range(limit):
        if abs(e) <= eps:
            return t
        e = (1.0 - loop_gain) * e
    return None


def beta_survival(a, b, x):
    """P(Beta(a, b) >= x) through mpmath's regularized incomplete beta."""
    with mpmath.workdps(30):
        return float(mpmath.betainc(a, b, x, 1, regularized=True))


def two_stage_period(d_detect, d_generate, alpha, n_frames, capacity=2, warm=5):
    """Event recursion of a detect -> bounded queue -> describe pipeline.

    The producer may run at most ``capacity + 1`` frames ahead of the
    consumer (queue slots plus the item being put). Returns the steady-state
    spacing of consumer completions.
    """
    det_done = [0.0] * n_frames
    gen_done = [0.0] * n_frames
    for k in range(n_frames):
        start = det_done[k - 1] if k else 0.0
        # blocked until the consumer has taken frame k - capacity - 1
        if k - capacity - 1 >= 0:
            start = max(start, gen_done[k - capacity - 1] - d_generate - alpha)
        det_done[k] = start + d_detect
        prev = gen_done[k - 1] if k else 0.0
        gen_done[k] = max(det_done[k], prev) + d_generate + alpha
    return (gen_done[-1] - gen_done[warm]) / (n_frames - 1 - warm)


def serial_period(d_detect, d_generate, alpha):
    return d_detect + d_generate + alpha


def linear_r2(x, y):
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxx = math.fsum((a - mx) ** 2 for a in x)
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    syy = math.fsum((b - my) ** 2 for b in y)
    return (sxy * sxy) / (sxx * syy)
