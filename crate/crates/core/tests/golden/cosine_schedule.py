"""Scalar cosine-schedule reference in 50-digit arithmetic.

Writes cosine_k100.txt with one alpha-bar value per line for k = 0..100.
"""

from mpmath import mp, mpf, cos, pi

mp.dps = 50
K = 100
S = mpf("0.008")


def f(k):
    t = (mpf(k) / K + S) / (1 + S)
    return cos(t * pi / 2) ** 2


alpha = [mpf(1)]
for k in range(1, K + 1):
    beta = min(1 - (f(k) / f(0)) / (f(k - 1) / f(0)), mpf("0.999"))
    alpha.append(alpha[-1] * (1 - beta))

with open("cosine_k100.txt", "w") as out:
    for a in alpha:
        out.write(mp.nstr(a, 30) + "\n")
