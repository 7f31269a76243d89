import hashlib

import numpy as np
from django.test import SimpleTestCase
from ecdsa import ecdsa as reference
from ecdsa.curves import SECP160r1

from core.curves import (
    INFINITY, SECP160R1, TOY_CURVE, Signature, generate_keypair, get_curve, hash_message, inverse_mod, point_add,
    public_key, random_scalar, scalar_mult, sign, verify,
)
from core.exceptions import ConfigurationError, NonInvertibleError, OffCurveError, UsageError
from core.hnp import recover_from_known_nonce


class CurveParamsTest(SimpleTestCase):
    def test_shipped_curves_validate(self):
        SECP160R1.validate()
        TOY_CURVE.validate()
        self.assertEqual(SECP160R1.bits, 161)

    def test_matches_reference_constants(self):
        self.assertEqual(SECP160R1.n_order, SECP160r1.order)
        self.assertEqual(SECP160R1.G, (SECP160r1.generator.x(), SECP160r1.generator.y()))

    def test_unknown_curve(self):
        self.assertIs(get_curve('secp160r1'), SECP160R1)
        with self.assertRaises(ConfigurationError):
            get_curve('secp256k1')


class ArithmeticTest(SimpleTestCase):
    def test_scalar_mult_matches_reference(self):
        rng = np.random.default_rng(0)
        generator = SECP160r1.generator
        for _ in range(10):
            k = random_scalar(rng, SECP160R1.n_order)
            point = scalar_mult(k, SECP160R1.G, SECP160R1)
            expected = k * generator
            self.assertEqual(point, (expected.x(), expected.y()))

    def test_group_law_on_toy_curve(self):
        multiples = [scalar_mult(k, TOY_CURVE.G, TOY_CURVE) for k in range(TOY_CURVE.n_order + 1)]
        self.assertIs(multiples[0], INFINITY)
        self.assertIs(multiples[-1], INFINITY)
        self.assertEqual(len(set(multiples[1:-1])), TOY_CURVE.n_order - 1)
        for a in range(TOY_CURVE.n_order):
            for b in range(TOY_CURVE.n_order):
                self.assertEqual(point_add(multiples[a], multiples[b], TOY_CURVE),
                                 multiples[(a + b) % TOY_CURVE.n_order])

    def test_negative_scalar(self):
        P = scalar_mult(3, TOY_CURVE.G, TOY_CURVE)
        self.assertIs(point_add(P, scalar_mult(-3, TOY_CURVE.G, TOY_CURVE), TOY_CURVE), INFINITY)

    def test_off_curve_point(self):
        with self.assertRaises(OffCurveError):
            scalar_mult(2, (1, 1), TOY_CURVE)

    def test_inverse(self):
        self.assertEqual(inverse_mod(3, 19) * 3 % 19, 1)
        with self.assertRaises(NonInvertibleError):
            inverse_mod(0, 19)

    def test_random_scalar_range(self):
        rng = np.random.default_rng(1)
        draws = {random_scalar(rng, 8, 3) for _ in range(500)}
        self.assertEqual(draws, {3, 4, 5, 6, 7})
        with self.assertRaises(UsageError):
            random_scalar(rng, 3, 3)


class EcdsaTest(SimpleTestCase):
    def setUp(self):
        self.keypair = generate_keypair(SECP160R1, np.random.default_rng(2))
        self.h = hash_message(b'attack lab', SECP160R1)

    def test_hash_is_sha1(self):
        self.assertEqual(self.h, int.from_bytes(hashlib.sha1(b'attack lab').digest(), 'big'))

    def test_signature_matches_reference(self):
        generator = SECP160r1.generator
        d = self.keypair.d
        ref_key = reference.Private_key(reference.Public_key(generator, generator * d), d)
        rng = np.random.default_rng(3)
        for _ in range(5):
            k = random_scalar(rng, SECP160R1.n_order)
            ours = sign(d, self.h, k, SECP160R1)
            theirs = ref_key.sign(self.h, k)
            self.assertEqual((ours.r, ours.s), (theirs.r, theirs.s))
            self.assertTrue(ref_key.public_key.verifies(self.h, reference.Signature(ours.r, ours.s)))
            self.assertTrue(verify(self.keypair.pub, self.h, ours, SECP160R1))

    def test_tampered_signature_fails(self):
        sig = sign(self.keypair.d, self.h, 12345, SECP160R1)
        tampered = Signature(sig.r, (sig.s + 1) % SECP160R1.n_order, sig.h)
        self.assertFalse(verify(self.keypair.pub, self.h, tampered, SECP160R1))
        self.assertFalse(verify(self.keypair.pub, self.h + 1, sig, SECP160R1))
        self.assertFalse(verify(self.keypair.pub, self.h, Signature(0, sig.s, sig.h), SECP160R1))

    def test_known_nonce_reveals_key(self):
        sig = sign(self.keypair.d, self.h, 987654321, SECP160R1)
        self.assertEqual(recover_from_known_nonce(sig, 987654321, SECP160R1), self.keypair.d)

    def test_exhaustive_toy_signatures(self):
        n = TOY_CURVE.n_order
        for d in range(1, n):
            pub = public_key(d, TOY_CURVE)
            for k in range(1, n):
                for h in (0, 5, 11):
                    try:
                        sig = sign(d, h, k, TOY_CURVE)
                    except UsageError:
                        continue
                    self.assertTrue(verify(pub, h, sig, TOY_CURVE))
                    self.assertEqual(recover_from_known_nonce(sig, k, TOY_CURVE), d)

    def test_nonce_range(self):
        with self.assertRaises(UsageError):
            sign(self.keypair.d, self.h, 0, SECP160R1)

    def test_signature_dict(self):
        sig = sign(self.keypair.d, self.h, 777, SECP160R1)
        self.assertNotIn('k', sig.to_dict())
        self.assertEqual(sig.to_dict(debug=True)['k'], hex(777))
        self.assertEqual(Signature.from_dict(sig.to_dict(debug=True)), sig)
