"""
Integral LLL reduction.

Gram-Schmidt data is kept as the integer quantities d_i (Gram determinants)
and lambda_{k,j} = d_{j+1} * mu_{k,j}, so every step is exact integer
arithmetic on gmpy2 mpz values.
"""
import logging
from fractions import Fraction
from typing import List, Sequence

from gmpy2 import mpz

from .exceptions import ConfigurationError, DependentRowsError

logger = logging.getLogger(__name__)

DEFAULT_DELTA = Fraction(99, 100)


def _dot(u, v):
    total = mpz(0)
    for a, b in zip(u, v):
        total += a * b
    return total


class IntegralLLL:
    def __init__(self, basis: Sequence[Sequence[int]], delta=DEFAULT_DELTA, max_swaps: int = None):
        delta = Fraction(str(delta)) if isinstance(delta, float) else Fraction(delta)
        if not Fraction(1, 4) < delta <= 1:
            raise ConfigurationError("LLL delta must lie in (1/4, 1]", delta=str(delta))
        self.num, self.den = delta.numerator, delta.denominator
        self.b = [[mpz(x) for x in row] for row in basis]
        self.n = len(self.b)
        self.lam = [[mpz(0)] * self.n for _ in range(self.n)]
        # d[i + 1] is the Gram determinant of rows 0..i
        self.d = [mpz(1)] + [mpz(0)] * self.n
        self.max_swaps = max_swaps
        self.swaps = 0

    def _redi(self, k, l):
        lam, d = self.lam, self.d
        if 2 * abs(lam[k][l]) <= d[l + 1]:
            return
        q = (2 * lam[k][l] + d[l + 1]) // (2 * d[l + 1])
        self.b[k] = [x - q * y for x, y in zip(self.b[k], self.b[l])]
        lam[k][l] -= q * d[l + 1]
        for i in range(l):
            lam[k][i] -= q * lam[l][i]

    def _swapi(self, k, kmax):
        lam, d, b = self.lam, self.d, self.b
        b[k], b[k - 1] = b[k - 1], b[k]
        for j in range(k - 1):
            lam[k][j], lam[k - 1][j] = lam[k - 1][j], lam[k][j]
        mu = lam[k][k - 1]
        B = (d[k - 1] * d[k + 1] + mu * mu) // d[k]
        for i in range(k + 1, kmax + 1):
            t = lam[i][k]
            lam[i][k] = (d[k + 1] * lam[i][k - 1] - mu * t) // d[k]
            lam[i][k - 1] = (B * t + mu * lam[i][k]) // d[k + 1]
        d[k] = B
        self.swaps += 1

    def _gram_schmidt_row(self, k):
        lam, d, b = self.lam, self.d, self.b
        for j in range(k + 1):
            u = _dot(b[k], b[j])
            for i in range(j):
                u = (d[i + 1] * u - lam[k][i] * lam[j][i]) // d[i]
            if j < k:
                lam[k][j] = u
            elif u == 0:
                raise DependentRowsError("basis rows are linearly dependent", row=k)
            else:
                d[k + 1] = u

    def reduce(self) -> List[List[int]]:
        if self.n == 0:
            return []
        self._gram_schmidt_row(0)
        k, kmax = 1, 0
        while k < self.n:
            if k > kmax:
                kmax = k
                self._gram_schmidt_row(k)
            self._redi(k, k - 1)
            mu = self.lam[k][k - 1]
            if self.den * (self.d[k + 1] * self.d[k - 1] + mu * mu) < self.num * self.d[k] * self.d[k]:
                if self.max_swaps is not None and self.swaps >= self.max_swaps:
                    logger.debug(f"LLL pass stopped at the swap guard ({self.swaps})")
                    break
                self._swapi(k, kmax)
                k = max(1, k - 1)
            else:
                for l in range(k - 2, -1, -1):
                    self._redi(k, l)
                k += 1
        return [[int(x) for x in row] for row in self.b]


def lll(basis: Sequence[Sequence[int]], delta=DEFAULT_DELTA, block2_passes: int = 0) -> List[List[int]]:
    """LLL-reduce the rows of `basis`; optional strict passes follow at delta = 1."""
    reduced = IntegralLLL(basis, delta).reduce()
    n = len(reduced)
    for _ in range(block2_passes):
        strict = IntegralLLL(reduced, 1, max_swaps=10 * n * n + 10)
        reduced = strict.reduce()
        if strict.swaps == 0:
            break
    return reduced


def gram_schmidt(basis: Sequence[Sequence[int]]):
    """Exact rational Gram-Schmidt: (orthogonal rows, mu matrix)."""
    rows = [[Fraction(x) for x in row] for row in basis]
    ortho, norms = [], []
    mu = [[Fraction(0)] * len(rows) for _ in rows]
    for i, row in enumerate(rows):
        vector = list(row)
        for j in range(i):
            mu[i][j] = sum(a * b for a, b in zip(row, ortho[j])) / norms[j]
            vector = [a - mu[i][j] * b for a, b in zip(vector, ortho[j])]
        ortho.append(vector)
        norms.append(sum(a * a for a in vector))
    return ortho, mu


def is_lll_reduced(basis: Sequence[Sequence[int]], delta=DEFAULT_DELTA) -> bool:
    delta = Fraction(str(delta)) if isinstance(delta, float) else Fraction(delta)
    ortho, mu = gram_schmidt(basis)
    norms = [sum(a * a for a in row) for row in ortho]
    for i in range(len(basis)):
        if any(abs(mu[i][j]) > Fraction(1, 2) for j in range(i)):
            return False
        if i and norms[i] < (delta - mu[i][i - 1] ** 2) * norms[i - 1]:
            return False
    return True


def determinant(matrix: Sequence[Sequence[int]]) -> int:
    """Bareiss fraction-free elimination."""
    m = [[mpz(x) for x in row] for row in matrix]
    n = len(m)
    if n == 0:
        return 1
    sign, previous = 1, mpz(1)
    for k in range(n - 1):
        if m[k][k] == 0:
            swap = next((i for i in range(k + 1, n) if m[i][k] != 0), None)
            if swap is None:
                return 0
            m[k], m[swap] = m[swap], m[k]
            sign = -sign
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                m[i][j] = (m[i][j] * m[k][k] - m[i][k] * m[k][j]) // previous
        previous = m[k][k]
    return int(sign * m[n - 1][n - 1])
