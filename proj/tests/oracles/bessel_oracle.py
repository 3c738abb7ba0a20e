# SPDX-License-Identifier: Apache-2.0
"""Frozen reference values for J0/Y0.

Evaluates the ascending power series for J0 and Y0 in 100-digit arithmetic
(mpmath.mpf only, no library Bessel routines) and writes
tests/data/bessel_oracle.csv. Rerun only if the sample points change.
"""
import os
import mpmath as mp

mp.mp.dps = 100
EULER = mp.euler


def series(x):
    x = mp.mpf(x)
    q = x * x / 4
    term = mp.mpf(1)
    j0 = mp.mpf(1)
    harmonic = mp.mpf(0)
    tail = mp.mpf(0)
    k = 0
    while True:
        k += 1
        term = -term * q / (k * k)
        harmonic += mp.mpf(1) / k
        j0 += term
        tail -= term * harmonic
        if abs(term) * (1 + harmonic) < mp.mpf(10) ** (-60) and k > q:
            break
    y0 = 2 / mp.pi * ((mp.log(x / 2) + EULER) * j0 + tail)
    return j0, y0


def first_zero():
    lo, hi = mp.mpf(2), mp.mpf(3)
    for _ in range(200):
        mid = (lo + hi) / 2
        if series(lo)[0] * series(mid)[0] <= 0:
            hi = mid
        else:
            lo = mid
    return (lo + hi) / 2


def main():
    pts = []
    for i in range(500):
        pts.append(mp.mpf("1e-3") * mp.power(mp.mpf(10) ** 5, mp.mpf(i) / 499))
    for i in range(500):
        pts.append(mp.mpf("1e-3") + (mp.mpf(100) - mp.mpf("1e-3")) * mp.mpf(i) / 499)
    here = os.path.dirname(os.path.abspath(__file__))
    out = os.path.join(here, "..", "data", "bessel_oracle.csv")
    with open(out, "w") as fh:
        fh.write("x,j0,y0\n")
        for x in pts:
            xd = float(x)  # tabulate at the exactly representable double
            j0, y0 = series(mp.mpf(xd))
            fh.write("%s,%s,%s\n" % (repr(xd), mp.nstr(j0, 20), mp.nstr(y0, 20)))
    j1, y1 = series(1)
    print("J0(1) =", mp.nstr(j1, 15), "Y0(1) =", mp.nstr(y1, 15))
    print("first zero =", mp.nstr(first_zero(), 20))


if __name__ == "__main__":
    main()
