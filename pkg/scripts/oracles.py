"""Independent oracles for the frozen expected values in tests/.

Everything here uses exact rationals, mpmath, or brute-force enumeration and
never imports the geodiff package. Run once; the printed values are pasted
into the tests.

    python scripts/oracles.py
"""
from fractions import Fraction
from itertools import product

import mpmath

mpmath.mp.dps = 50


def alpha_bar_scaled_linear(T, beta_start, beta_end):
    lo = mpmath.sqrt(mpmath.mpf(beta_start))
    hi = mpmath.sqrt(mpmath.mpf(beta_end))
    prod = mpmath.mpf(1)
    for i in range(T):
        frac = mpmath.mpf(i) / (T - 1) if T > 1 else mpmath.mpf(0)
        beta = (lo + (hi - lo) * frac) ** 2
        prod *= 1 - beta
    return prod


def align_exact(pred, gt):
    n = len(pred)
    sd, sg = sum(pred), sum(gt)
    sdd = sum(p * p for p in pred)
    sdg = sum(p * g for p, g in zip(pred, gt))
    s = (n * sdg - sd * sg) / (n * sdd - sd * sd)
    t = (sg - s * sd) / n
    return s, t


def align_grid(pred, gt, lo=-3.0, hi=3.0, n=601):
    """Coarse-to-fine brute-force search of the squared-error minimiser."""
    best = None
    cs, ct, span = 0.0, 0.0, hi - lo
    for _ in range(6):
        for i, j in product(range(n), repeat=2):
            s = cs - span / 2 + span * i / (n - 1)
            t = ct - span / 2 + span * j / (n - 1)
            err = sum((s * p + t - g) ** 2 for p, g in zip(pred, gt))
            if best is None or err < best[0]:
                best = (err, s, t)
        _, cs, ct = best
        span /= 50
    return best[1], best[2]


def percentile_sorted(values, q):
    """Linear-interpolation percentile from a full sort."""
    v = sorted(values)
    pos = Fraction(q, 100) * (len(v) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(v) - 1)
    frac = pos - lo
    return v[lo] + (v[hi] - v[lo]) * frac


def ddim_chain_oracle(z0, eps, steps, alpha_bar):
    """Deterministic DDIM with exact v predictions, evaluated in mpmath."""
    ab = lambda t: mpmath.mpf(1) if t == 0 else alpha_bar(t)
    a = ab(steps[0])
    z = mpmath.sqrt(a) * z0 + mpmath.sqrt(1 - a) * eps
    seq = list(steps) + [0]
    for t, tp in zip(seq[:-1], seq[1:]):
        a = ab(t)
        v = mpmath.sqrt(a) * eps - mpmath.sqrt(1 - a) * z0
        z0_hat = mpmath.sqrt(a) * z - mpmath.sqrt(1 - a) * v
        eps_hat = mpmath.sqrt(a) * v + mpmath.sqrt(1 - a) * z
        ap = ab(tp)
        z = mpmath.sqrt(ap) * z0_hat + mpmath.sqrt(1 - ap) * eps_hat
    return z


def main():
    ab = alpha_bar_scaled_linear(1000, "0.00085", "0.012")
    print("alpha_bar_1000 scaled_linear(0.00085, 0.012):", mpmath.nstr(ab, 20))
    print("alpha_bar for T=2 linear(0.1,0.2):", Fraction(9, 10) * Fraction(8, 10))

    a = Fraction(72, 100)
    val = mpmath.sqrt(mpmath.mpf(a.numerator) / a.denominator) + mpmath.sqrt(
        1 - mpmath.mpf(a.numerator) / a.denominator
    )
    print("forward_diffuse z0=1 eps=1 abar=0.72:", mpmath.nstr(val, 20))

    pred = [Fraction(1), Fraction(2), Fraction(3)]
    gt = [Fraction(2), Fraction(2), Fraction(5)]
    s, t = align_exact(pred, gt)
    gs, gt_ = align_grid([1.0, 2.0, 3.0], [2.0, 2.0, 5.0])
    print("align [1,2,3]->[2,2,5] exact:", s, t, "grid:", round(gs, 6), round(gt_, 6))
    resid = [abs(g - (s * p + t)) for p, g in zip(pred, gt)]
    print("  L1 loss:", sum(resid) / len(resid))

    # AbsRel 4-pixel case (alignment bypassed): pred vs gt
    p4 = [Fraction(1), Fraction(2), Fraction(33, 10), Fraction(35, 10)]
    g4 = [Fraction(1), Fraction(5, 2), Fraction(3), Fraction(4)]
    absrel = sum(abs(g - p) / g for p, g in zip(p4, g4)) / 4
    print("absrel 4px (no align):", absrel, float(absrel))
    # delta1 enumeration on the same case
    ok = sum(1 for p, g in zip(p4, g4) if max(p / g, g / p) < Fraction(5, 4))
    print("delta1 4px (no align):", 100 * Fraction(ok, 4))

    # AbsRel 4-pixel case with alignment
    p4b = [Fraction(1), Fraction(2), Fraction(4), Fraction(3)]
    g4b = [Fraction(2), Fraction(3), Fraction(4), Fraction(5)]
    s, t = align_exact(p4b, g4b)
    aligned = [s * p + t for p in p4b]
    absrel = sum(abs(g - a) / g for a, g in zip(aligned, g4b)) / 4
    print("aligned 4px: s,t =", s, t, "absrel =", absrel, float(absrel))
    ok = sum(1 for a, g in zip(aligned, g4b) if a > 0 and max(a / g, g / a) < Fraction(5, 4))
    print("  delta1 =", 100 * Fraction(ok, 4))

    # percentile/normalisation oracle on 100 values v_i = (i*37 % 100) + i/1000
    vals = [Fraction(i * 37 % 100) + Fraction(i, 1000) for i in range(100)]
    p2 = percentile_sorted(vals, 2)
    p98 = percentile_sorted(vals, 98)
    print("percentiles p2,p98:", p2, p98, float(p2), float(p98))
    for i in (0, 1, 27, 50, 99):
        c = min(max(vals[i], p2), p98)
        print(f"  norm[{i}] =", float(2 * (c - p2) / (p98 - p2) - 1))

    # 2-step trailing chain (T=1000 scaled linear) with exact predictions
    lo = mpmath.sqrt(mpmath.mpf("0.00085"))
    hi = mpmath.sqrt(mpmath.mpf("0.012"))
    cum = [mpmath.mpf(1)]
    for i in range(1000):
        cum.append(cum[-1] * (1 - (lo + (hi - lo) * mpmath.mpf(i) / 999) ** 2))
    z = ddim_chain_oracle(mpmath.mpf("0.3"), mpmath.mpf("-1.2"), [1000, 500], lambda t: cum[t])
    print("2-step trailing chain z0=0.3 eps=-1.2 ->", mpmath.nstr(z, 25))
    print("alpha_bar_500:", mpmath.nstr(cum[500], 20), "alpha_bar_1:", mpmath.nstr(cum[1], 20))


if __name__ == "__main__":
    main()
