//! Arithmetic over GF(2^k) for 1 <= k <= 16.
//!
//! A `FieldSpec` fixes the exponent `k` and the reduction polynomial at run
//! time. Addition is XOR. Multiplication goes through log/antilog tables for
//! k <= 8 and through carry-less multiply-and-reduce above that; the two
//! paths are cross-checked in tests.

use thiserror::Error;

/// Element of GF(2^k), stored as its polynomial bit pattern. Valid values are
/// in `[0, 2^k)`; `FieldSpec::element` validates, arithmetic assumes validity.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug, Default, PartialOrd, Ord)]
pub struct Fe(pub u16);

impl Fe {
    pub const ZERO: Fe = Fe(0);
    pub const ONE: Fe = Fe(1);
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FieldError {
    #[error("field exponent k={0} outside supported range 1..=16")]
    UnsupportedExponent(u32),
    #[error("reduction polynomial {poly:#x} has degree {got}, expected {want}")]
    WrongDegree { poly: u32, got: u32, want: u32 },
    #[error("reduction polynomial {poly:#x} is reducible (divisible by {divisor:#x})")]
    Reducible { poly: u32, divisor: u32 },
    #[error("value {value} is not an element of a field of order {q}")]
    OutOfRange { value: u16, q: u32 },
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
}

/// Default reduction polynomials, indexed by k-1. All irreducible over GF(2);
/// k=8 is the polynomial x^8+x^4+x^3+x+1 commonly used for byte-oriented codes.
const DEFAULT_POLY: [u32; 16] = [
    0x3,     // x + 1
    0x7,     // x^2 + x + 1
    0xB,     // x^3 + x + 1
    0x13,    // x^4 + x + 1
    0x25,    // x^5 + x^2 + 1
    0x43,    // x^6 + x + 1
    0x83,    // x^7 + x + 1
    0x11B,   // x^8 + x^4 + x^3 + x + 1
    0x211,   // x^9 + x^4 + 1
    0x409,   // x^10 + x^3 + 1
    0x805,   // x^11 + x^2 + 1
    0x1053,  // x^12 + x^6 + x^4 + x + 1
    0x201B,  // x^13 + x^4 + x^3 + x + 1
    0x4443,  // x^14 + x^10 + x^6 + x + 1
    0x8003,  // x^15 + x + 1
    0x1100B, // x^16 + x^12 + x^3 + x + 1
];

const TABLE_MAX_K: u32 = 8;

#[derive(Clone, PartialEq, Eq)]
struct LogTables {
    /// log[a] for a in 1..q, offset by -1 (log[0] is unused padding).
    log: Vec<u16>,
    /// exp[i] = g^i for i in 0..2(q-1), doubled so a log sum needs no modulo.
    exp: Vec<u16>,
}

/// A concrete GF(2^k) instance: exponent, reduction polynomial, and (for
/// k <= 8) multiplication tables built from a generator of the unit group.
#[derive(Clone)]
pub struct FieldSpec {
    k: u32,
    q: u32,
    poly: u32,
    tables: Option<LogTables>,
}

impl PartialEq for FieldSpec {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k && self.poly == other.poly
    }
}
impl Eq for FieldSpec {}

impl std::fmt::Debug for FieldSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FieldSpec(k={}, poly={:#x})", self.k, self.poly)
    }
}

fn degree(p: u64) -> i32 {
    63 - p.leading_zeros() as i32
}

/// Carry-less product of two polynomials over GF(2).
fn clmul(a: u32, b: u32) -> u64 {
    let mut acc = 0u64;
    let mut i = 0;
    let mut b = b as u64;
    while b != 0 {
        if b & 1 != 0 {
            acc ^= (a as u64) << i;
        }
        b >>= 1;
        i += 1;
    }
    acc
}

/// Remainder of `x` divided by `poly` in GF(2)[x].
fn polymod(mut x: u64, poly: u32) -> u64 {
    let dp = degree(poly as u64);
    while x != 0 {
        let dx = degree(x);
        if dx < dp {
            break;
        }
        x ^= (poly as u64) << (dx - dp);
    }
    x
}

impl FieldSpec {
    /// Field with the default reduction polynomial for `k`.
    pub fn new(k: u32) -> Result<FieldSpec, FieldError> {
        if !(1..=16).contains(&k) {
            return Err(FieldError::UnsupportedExponent(k));
        }
        FieldSpec::with_poly(k, DEFAULT_POLY[(k - 1) as usize])
    }

    /// Field with an explicit reduction polynomial of degree `k`.
    /// The polynomial is checked for irreducibility over GF(2).
    pub fn with_poly(k: u32, poly: u32) -> Result<FieldSpec, FieldError> {
        if !(1..=16).contains(&k) {
            return Err(FieldError::UnsupportedExponent(k));
        }
        let got = if poly == 0 { 0 } else { degree(poly as u64) as u32 };
        if got != k {
            return Err(FieldError::WrongDegree { poly, got, want: k });
        }
        // An irreducible polynomial of degree k has no divisor of degree
        // in 1..=k/2; trial division over all of them is cheap for k <= 16.
        for d in 1..=(k / 2) {
            for cand in (1u32 << d)..(1u32 << (d + 1)) {
                if polymod(poly as u64, cand) == 0 {
                    return Err(FieldError::Reducible { poly, divisor: cand });
                }
            }
        }
        let q = 1u32 << k;
        let mut spec = FieldSpec { k, q, poly, tables: None };
        if k <= TABLE_MAX_K {
            spec.tables = Some(spec.build_tables());
        }
        Ok(spec)
    }

    fn build_tables(&self) -> LogTables {
        let q = self.q as usize;
        let order = q - 1;
        // The unit group is cyclic; scan for a generator. The reduction
        // polynomial need not be primitive, so 2 is not always one.
        let mut generator = None;
        'outer: for g in 2..self.q {
            let mut x = Fe::ONE;
            for step in 1..=order {
                x = self.mul_clr(x, Fe(g as u16));
                if x == Fe::ONE {
                    if step == order {
                        generator = Some(Fe(g as u16));
                        break 'outer;
                    }
                    continue 'outer;
                }
            }
        }
        let g = generator.unwrap_or(Fe::ONE); // k=1: the unit group is trivial
        let mut log = vec![0u16; q];
        let mut exp = vec![0u16; 2 * order];
        let mut x = Fe::ONE;
        for i in 0..order {
            exp[i] = x.0;
            exp[i + order] = x.0;
            log[x.0 as usize] = i as u16;
            x = self.mul_clr(x, g);
        }
        LogTables { log, exp }
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// Field order q = 2^k.
    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn poly(&self) -> u32 {
        self.poly
    }

    /// Validated element constructor.
    pub fn element(&self, value: u16) -> Result<Fe, FieldError> {
        if (value as u32) < self.q {
            Ok(Fe(value))
        } else {
            Err(FieldError::OutOfRange { value, q: self.q })
        }
    }

    pub fn contains(&self, a: Fe) -> bool {
        (a.0 as u32) < self.q
    }

    /// Uniformly random element, zero included.
    pub fn random(&self, rng: &mut impl rand::Rng) -> Fe {
        Fe(rng.random_range(0..self.q) as u16)
    }

    /// Uniformly random nonzero element.
    pub fn random_nonzero(&self, rng: &mut impl rand::Rng) -> Fe {
        Fe(rng.random_range(1..self.q) as u16)
    }

    /// Addition; identical to subtraction in characteristic 2.
    #[inline]
    pub fn add(&self, a: Fe, b: Fe) -> Fe {
        debug_assert!(self.contains(a) && self.contains(b));
        Fe(a.0 ^ b.0)
    }

    /// Subtraction (alias of addition, kept for call-site clarity).
    #[inline]
    pub fn sub(&self, a: Fe, b: Fe) -> Fe {
        self.add(a, b)
    }

    #[inline]
    pub fn mul(&self, a: Fe, b: Fe) -> Fe {
        debug_assert!(self.contains(a) && self.contains(b));
        match &self.tables {
            Some(t) => {
                if a.0 == 0 || b.0 == 0 {
                    Fe::ZERO
                } else {
                    Fe(t.exp[t.log[a.0 as usize] as usize + t.log[b.0 as usize] as usize])
                }
            }
            None => self.mul_clr(a, b),
        }
    }

    /// Table-free multiply: carry-less product reduced by the field polynomial.
    fn mul_clr(&self, a: Fe, b: Fe) -> Fe {
        Fe(polymod(clmul(a.0 as u32, b.0 as u32), self.poly) as u16)
    }

    pub fn pow(&self, a: Fe, mut e: u64) -> Fe {
        let mut base = a;
        let mut acc = Fe::ONE;
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            e >>= 1;
        }
        acc
    }

    pub fn inv(&self, a: Fe) -> Result<Fe, FieldError> {
        if a.0 == 0 {
            return Err(FieldError::ZeroInverse);
        }
        debug_assert!(self.contains(a));
        match &self.tables {
            Some(t) => {
                let order = (self.q - 1) as usize;
                let l = t.log[a.0 as usize] as usize;
                Ok(Fe(t.exp[(order - l) % order]))
            }
            // a^(q-2) = a^(-1) in a field of order q
            None => Ok(self.pow(a, (self.q - 2) as u64)),
        }
    }

    pub fn div(&self, a: Fe, b: Fe) -> Result<Fe, FieldError> {
        Ok(self.mul(a, self.inv(b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    /// Independent multiply oracle: schoolbook bit-by-bit polynomial product,
    /// then long division by scanning for the highest set bit.
    fn slow_mul(a: u16, b: u16, k: u32, poly: u32) -> u16 {
        let mut prod = [false; 32];
        for i in 0..16 {
            for j in 0..16 {
                if (a >> i) & 1 == 1 && (b >> j) & 1 == 1 {
                    prod[i + j] ^= true;
                }
            }
        }
        for top in (k as usize..32).rev() {
            if prod[top] {
                for bit in 0..=k {
                    if (poly >> bit) & 1 == 1 {
                        prod[top - k as usize + bit as usize] ^= true;
                    }
                }
            }
        }
        let mut out = 0u16;
        for (i, set) in prod.iter().enumerate().take(k as usize) {
            if *set {
                out |= (1 << i) as u16;
            }
        }
        out
    }

    #[test]
    fn default_polynomials_are_irreducible() {
        for k in 1..=16 {
            FieldSpec::new(k).unwrap();
        }
    }

    #[test]
    fn rejects_bad_polynomials() {
        // x^4 + 1 = (x+1)^4
        assert!(matches!(
            FieldSpec::with_poly(4, 0x11),
            Err(FieldError::Reducible { .. })
        ));
        // x^8 alone is divisible by x
        assert!(matches!(
            FieldSpec::with_poly(8, 0x100),
            Err(FieldError::Reducible { divisor: 0x2, .. })
        ));
        assert!(matches!(
            FieldSpec::with_poly(8, 0x1B),
            Err(FieldError::WrongDegree { .. })
        ));
        assert!(matches!(FieldSpec::new(0), Err(FieldError::UnsupportedExponent(0))));
        assert!(matches!(FieldSpec::new(17), Err(FieldError::UnsupportedExponent(17))));
    }

    #[test]
    fn byte_field_known_answers() {
        let f = FieldSpec::new(8).unwrap();
        assert_eq!(f.add(Fe(0x57), Fe(0x83)), Fe(0xD4));
        assert_eq!(f.mul(Fe(0x57), Fe(0x83)), Fe(0xC1));
        assert_eq!(f.mul(Fe(0x53), Fe(0xCA)), Fe(0x01));
        assert_eq!(f.inv(Fe(0x53)).unwrap(), Fe(0xCA));
    }

    #[test]
    fn binary_field_is_boolean_algebra() {
        let f = FieldSpec::new(1).unwrap();
        for a in 0..2u16 {
            for b in 0..2u16 {
                assert_eq!(f.add(Fe(a), Fe(b)).0, a ^ b);
                assert_eq!(f.mul(Fe(a), Fe(b)).0, a & b);
            }
        }
        assert_eq!(f.inv(Fe(1)).unwrap(), Fe(1));
        assert_eq!(f.inv(Fe(0)), Err(FieldError::ZeroInverse));
    }

    fn check_axioms_exhaustive(k: u32) {
        let f = FieldSpec::new(k).unwrap();
        let q = f.q() as u16;
        for a in 0..q {
            let a = Fe(a);
            assert_eq!(f.add(a, Fe::ZERO), a);
            assert_eq!(f.mul(a, Fe::ONE), a);
            assert_eq!(f.add(a, a), Fe::ZERO, "characteristic 2");
            if a != Fe::ZERO {
                let ai = f.inv(a).unwrap();
                assert_eq!(f.mul(a, ai), Fe::ONE);
            }
            for b in 0..q {
                let b = Fe(b);
                assert_eq!(f.add(a, b), f.add(b, a));
                assert_eq!(f.mul(a, b), f.mul(b, a));
                for c in 0..q {
                    let c = Fe(c);
                    assert_eq!(f.add(f.add(a, b), c), f.add(a, f.add(b, c)));
                    assert_eq!(f.mul(f.mul(a, b), c), f.mul(a, f.mul(b, c)));
                    assert_eq!(
                        f.mul(a, f.add(b, c)),
                        f.add(f.mul(a, b), f.mul(a, c)),
                        "distributivity at k={k}"
                    );
                }
            }
        }
    }

    #[test]
    fn axioms_exhaustive_small_fields() {
        for k in 1..=4 {
            check_axioms_exhaustive(k);
        }
    }

    #[test]
    fn tables_match_carryless_path_exhaustively() {
        for k in [2, 5, 8] {
            let f = FieldSpec::new(k).unwrap();
            for a in 0..f.q() as u16 {
                for b in 0..f.q() as u16 {
                    assert_eq!(f.mul(Fe(a), Fe(b)), f.mul_clr(Fe(a), Fe(b)), "k={k} a={a} b={b}");
                }
            }
        }
    }

    #[test]
    fn multiply_matches_independent_oracle() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for k in [3, 8, 11, 16] {
            let f = FieldSpec::new(k).unwrap();
            for _ in 0..4000 {
                let a = f.random(&mut rng);
                let b = f.random(&mut rng);
                assert_eq!(f.mul(a, b).0, slow_mul(a.0, b.0, k, f.poly()));
            }
        }
    }

    #[test]
    fn inverses_exhaustive_byte_field_and_random_wide() {
        let f = FieldSpec::new(8).unwrap();
        for a in 1..f.q() as u16 {
            assert_eq!(f.mul(Fe(a), f.inv(Fe(a)).unwrap()), Fe::ONE);
        }
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        for k in [12, 16] {
            let f = FieldSpec::new(k).unwrap();
            for _ in 0..2000 {
                let a = f.random_nonzero(&mut rng);
                assert_eq!(f.mul(a, f.inv(a).unwrap()), Fe::ONE);
            }
        }
    }

    #[test]
    fn element_range_is_validated() {
        let f = FieldSpec::new(4).unwrap();
        assert!(f.element(15).is_ok());
        assert_eq!(f.element(16), Err(FieldError::OutOfRange { value: 16, q: 16 }));
    }

    proptest! {
        #[test]
        fn prop_field_axioms_wide(a in 0u16.., b in 0u16.., c in 0u16..) {
            let f = FieldSpec::new(16).unwrap();
            let (a, b, c) = (Fe(a), Fe(b), Fe(c));
            prop_assert_eq!(f.mul(a, b), f.mul(b, a));
            prop_assert_eq!(f.mul(f.mul(a, b), c), f.mul(a, f.mul(b, c)));
            prop_assert_eq!(f.mul(a, f.add(b, c)), f.add(f.mul(a, b), f.mul(a, c)));
        }

        #[test]
        fn prop_division_round_trips(a in 0u16.., b in 1u16..) {
            let f = FieldSpec::new(16).unwrap();
            let q = f.div(Fe(a), Fe(b)).unwrap();
            prop_assert_eq!(f.mul(q, Fe(b)), Fe(a));
        }
    }
}
