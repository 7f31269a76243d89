"""
Short-Weierstrass curve arithmetic and textbook ECDSA for the attack lab.

Nothing here is constant time; the module exists to produce signatures and
verify recovered keys.
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Tuple

import gmpy2

from .exceptions import ConfigurationError, NonInvertibleError, OffCurveError, UsageError

logger = logging.getLogger(__name__)

Point = Optional[Tuple[int, int]]
INFINITY: Point = None


@dataclass(frozen=True)
class CurveParams:
    name: str
    p: int
    a: int
    b: int
    gx: int
    gy: int
    n_order: int
    h: int = 1

    @property
    def G(self) -> Point:
        return (self.gx, self.gy)

    @property
    def bits(self) -> int:
        return self.n_order.bit_length()

    def contains(self, point: Point) -> bool:
        if point is INFINITY:
            return True
        x, y = point
        if not (0 <= x < self.p and 0 <= y < self.p):
            return False
        return (y * y - (x * x * x + self.a * x + self.b)) % self.p == 0

    def validate(self) -> 'CurveParams':
        if (4 * self.a ** 3 + 27 * self.b ** 2) % self.p == 0:
            raise ConfigurationError("singular curve", curve=self.name)
        if not self.contains(self.G):
            raise ConfigurationError("base point not on curve", curve=self.name)
        if not gmpy2.is_prime(self.n_order):
            raise ConfigurationError("group order is not prime", curve=self.name)
        if scalar_mult(self.n_order, self.G, self) is not INFINITY:
            raise ConfigurationError("n_order * G is not the point at infinity", curve=self.name)
        return self


# SEC 2 v1.0, section 2.4.2
SECP160R1 = CurveParams(
    name='secp160r1',
    p=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFF7FFFFFFF,
    a=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFF7FFFFFFC,
    b=0x1C97BEFC54BD7A8B65ACF89F81D4D4ADC565FA45,
    gx=0x4A96B5688EF573284664698968C38BB913CBFC82,
    gy=0x23A628553168947D59DCC912042351377AC5FB32,
    n_order=0x0100000000000000000001F4C8F927AED3CA752257,
    h=1,
)

# y^2 = x^3 + 2x + 2 over F_17, prime order 19
TOY_CURVE = CurveParams(name='toy', p=17, a=2, b=2, gx=5, gy=1, n_order=19, h=1)

CURVES = {curve.name: curve for curve in (SECP160R1, TOY_CURVE)}


def get_curve(name: str) -> CurveParams:
    try:
        return CURVES[name]
    except KeyError:
        raise ConfigurationError("unsupported curve", curve=name)


def inverse_mod(value: int, modulus: int) -> int:
    try:
        return int(gmpy2.invert(value % modulus, modulus))
    except ZeroDivisionError:
        raise NonInvertibleError("value has no inverse", modulus=modulus)


def point_neg(point: Point, curve: CurveParams) -> Point:
    if point is INFINITY:
        return INFINITY
    x, y = point
    return (x, (-y) % curve.p)


def point_add(P: Point, Q: Point, curve: CurveParams) -> Point:
    if P is INFINITY:
        return Q
    if Q is INFINITY:
        return P
    x1, y1 = P
    x2, y2 = Q
    p = curve.p
    if x1 == x2:
        if (y1 + y2) % p == 0:
            return INFINITY
        slope = (3 * x1 * x1 + curve.a) * inverse_mod(2 * y1, p) % p
    else:
        slope = (y2 - y1) * inverse_mod(x2 - x1, p) % p
    x3 = (slope * slope - x1 - x2) % p
    return (x3, (slope * (x1 - x3) - y1) % p)


def scalar_mult(k: int, point: Point, curve: CurveParams) -> Point:
    """Left-to-right double-and-add."""
    if not curve.contains(point):
        raise OffCurveError("point is not on the curve", curve=curve.name)
    if k < 0:
        return scalar_mult(-k, point_neg(point, curve), curve)
    result = INFINITY
    for bit in bin(k)[2:] if k else '':
        result = point_add(result, result, curve)
        if bit == '1':
            result = point_add(result, point, curve)
    return result


def random_scalar(rng, upper: int, lower: int = 1) -> int:
    """Uniform integer in [lower, upper) drawn from a numpy Generator."""
    span = upper - lower
    if span <= 0:
        raise UsageError("empty sampling range", lower=lower, upper=upper)
    nbytes = (span.bit_length() + 7) // 8 + 1
    while True:
        candidate = int.from_bytes(rng.bytes(nbytes), 'big') >> (8 * nbytes - span.bit_length())
        if candidate < span:
            return lower + candidate


@dataclass(frozen=True)
class KeyPair:
    d: int
    pub: Point


def generate_keypair(curve: CurveParams, rng) -> KeyPair:
    d = random_scalar(rng, curve.n_order)
    return KeyPair(d, scalar_mult(d, curve.G, curve))


def public_key(d: int, curve: CurveParams) -> Point:
    return scalar_mult(d, curve.G, curve)


def hash_message(message: bytes, curve: CurveParams) -> int:
    digest = int.from_bytes(hashlib.sha1(message).digest(), 'big')
    excess = 160 - curve.bits
    return digest >> excess if excess > 0 else digest


@dataclass(frozen=True)
class Signature:
    r: int
    s: int
    h: int
    # evaluation only
    k: Optional[int] = None

    def to_dict(self, debug: bool = False) -> dict:
        data = {'r': hex(self.r), 's': hex(self.s), 'h': hex(self.h)}
        if debug and self.k is not None:
            data['k'] = hex(self.k)
            data['debug'] = True
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> 'Signature':
        return cls(
            r=int(data['r'], 16),
            s=int(data['s'], 16),
            h=int(data['h'], 16),
            k=int(data['k'], 16) if 'k' in data else None,
        )


def sign(d: int, h: int, k: int, curve: CurveParams) -> Signature:
    n = curve.n_order
    if not 0 < k < n:
        raise UsageError("nonce out of range")
    r = scalar_mult(k, curve.G, curve)[0] % n
    s = inverse_mod(k, n) * (h + r * d) % n
    if r == 0 or s == 0:
        raise UsageError("nonce yields a degenerate signature")
    return Signature(r, s, h, k)


def verify(pub: Point, h: int, sig: Signature, curve: CurveParams) -> bool:
    n = curve.n_order
    if not (0 < sig.r < n and 0 < sig.s < n):
        return False
    if pub is INFINITY or not curve.contains(pub):
        return False
    w = inverse_mod(sig.s, n)
    point = point_add(scalar_mult(h * w % n, curve.G, curve), scalar_mult(sig.r * w % n, pub, curve), curve)
    return point is not INFINITY and point[0] % n == sig.r
