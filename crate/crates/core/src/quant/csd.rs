//! Canonical signed digit encoding of frozen int8 weights. A frozen weight
//! becomes a hard-wired shift-and-add scaler; zero weights are pruned.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const CSD_DIGITS: usize = 8;

/// Digits in {-1, 0, +1} over bit positions 0..8, least significant first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CsdCode {
    digits: [i8; CSD_DIGITS],
}

impl CsdCode {
    pub fn digits(&self) -> &[i8; CSD_DIGITS] {
        &self.digits
    }

    pub fn from_digits(digits: [i8; CSD_DIGITS]) -> Self {
        Self { digits }
    }

    pub fn nonzero_digits(&self) -> usize {
        self.digits.iter().filter(|&&d| d != 0).count()
    }

    /// Adders needed by the scaler; a lone shifted digit is just wiring.
    pub fn adder_cost(&self) -> usize {
        self.nonzero_digits().saturating_sub(1)
    }

    pub fn is_pruned(&self) -> bool {
        self.nonzero_digits() == 0
    }

    pub fn decode(&self) -> i32 {
        self.digits
            .iter()
            .enumerate()
            .map(|(i, &d)| d as i32 * (1 << i))
            .sum()
    }

    pub fn is_canonical(&self) -> bool {
        self.digits.windows(2).all(|w| w[0] == 0 || w[1] == 0)
    }

    /// `x * value` computed with shifts and adds only.
    #[inline]
    pub fn apply(&self, x: i32) -> i32 {
        let mut acc = 0i32;
        for (i, &d) in self.digits.iter().enumerate() {
            match d {
                1 => acc += x << i,
                -1 => acc -= x << i,
                _ => {}
            }
        }
        acc
    }
}

/// Non-adjacent form of `q`, which has the minimum number of nonzero digits.
pub fn encode_csd(q: i8) -> CsdCode {
    let mut digits = [0i8; CSD_DIGITS];
    let mut n = q as i32;
    let mut i = 0;
    while n != 0 {
        debug_assert!(i < CSD_DIGITS, "|q| <= 127 fits in 8 signed digits");
        if n & 1 != 0 {
            // 2 - (n mod 4) picks +1 for ...01 and -1 for ...11
            let d = 2 - n.rem_euclid(4);
            digits[i] = d as i8;
            n -= d;
        }
        n >>= 1;
        i += 1;
    }
    CsdCode { digits }
}

impl Serialize for CsdCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.decode() as i8)
    }
}

impl<'de> Deserialize<'de> for CsdCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let q = i8::deserialize(d)?;
        if q == i8::MIN {
            return Err(serde::de::Error::custom("-128 is outside the symmetric range"));
        }
        Ok(encode_csd(q))
    }
}
