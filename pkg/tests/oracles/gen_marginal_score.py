"""Marginal-score values by numerical quadrature, no Gaussian shortcuts.

For clean data x0 ~ N(mu, s^2) pushed through the mean-reverting forward
kernel N(m_t x0, sigma_t^2), the corrupted marginal is

    p_t(x) = integral N(x; m_t x0, sigma_t^2) N(x0; mu, s^2) dx0

and the score is p_t'(x) / p_t(x).  Both integrals are evaluated with
scipy.integrate.quad; derivative via the integrand's analytic x-derivative.
Printed values are frozen into tests/test_score.py.
"""

import math

import numpy as np
from scipy.integrate import quad

ALPHA, BETA = 1.2, 0.8
MU, S = 0.3, 0.7
T = 0.6

m = math.exp(-ALPHA * T)
var = (BETA**2 / ALPHA) * (1.0 - math.exp(-2.0 * ALPHA * T))


def gauss(x, mean, v):
    return math.exp(-((x - mean) ** 2) / (2 * v)) / math.sqrt(2 * math.pi * v)


def p(x):
    val, _ = quad(lambda x0: gauss(x, m * x0, var) * gauss(x0, MU, S**2), -12, 12, limit=400)
    return val


def dp(x):
    def integrand(x0):
        return -((x - m * x0) / var) * gauss(x, m * x0, var) * gauss(x0, MU, S**2)

    val, _ = quad(integrand, -12, 12, limit=400)
    return val


print(f"alpha={ALPHA} beta={BETA} mu={MU} s={S} t={T}")
print(f"m={m!r} var={var!r}")
for x in (-1.0, 0.2, 1.5):
    score = dp(x) / p(x)
    print(f"score({x!r}) = {score!r}")
