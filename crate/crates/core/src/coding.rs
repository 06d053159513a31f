//! Random linear coding over a variable batch.
//!
//! A batch of `nu` variables is spread as coded packets, each carrying a
//! coefficient vector over GF(2^k) plus the combined payload. A `Buffer`
//! accepts packets one at a time, keeps an incrementally row-reduced copy for
//! rank queries, and decodes once it holds `nu` independent combinations.

use crate::gf::{Fe, FieldSpec};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodingError {
    #[error("batch needs at least one variable")]
    EmptyBatch,
    #[error("packet size {bits} bits is not a positive multiple of the symbol size {k}")]
    BadPacketBits { bits: u32, k: u32 },
    #[error("coefficient vector has length {got}, buffer expects {want}")]
    CoefficientArity { got: usize, want: usize },
    #[error("payload has {got} symbols, buffer expects {want}")]
    PayloadArity { got: usize, want: usize },
    #[error("packet belongs to batch {got}, buffer holds batch {want}")]
    BatchMismatch { got: u64, want: u64 },
    #[error("decode requires rank {want}, buffer has rank {got}")]
    RankDeficient { got: usize, want: usize },
}

/// The source's plaintext: `nu` variables of `packet_bits` bits each,
/// stored as rows of `packet_bits / k` field symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariableBatch {
    pub batch_id: u64,
    pub variables: Vec<Vec<Fe>>,
}

impl VariableBatch {
    pub fn new(batch_id: u64, variables: Vec<Vec<Fe>>) -> Result<Self, CodingError> {
        if variables.is_empty() {
            return Err(CodingError::EmptyBatch);
        }
        let width = variables[0].len();
        for v in &variables {
            if v.len() != width {
                return Err(CodingError::PayloadArity { got: v.len(), want: width });
            }
        }
        Ok(VariableBatch { batch_id, variables })
    }

    /// Batch of uniformly random variable content.
    pub fn random(
        batch_id: u64,
        nu: usize,
        packet_bits: u32,
        field: &FieldSpec,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, CodingError> {
        if nu == 0 {
            return Err(CodingError::EmptyBatch);
        }
        if packet_bits == 0 || packet_bits % field.k() != 0 {
            return Err(CodingError::BadPacketBits { bits: packet_bits, k: field.k() });
        }
        let symbols = (packet_bits / field.k()) as usize;
        let variables = (0..nu)
            .map(|_| (0..symbols).map(|_| field.random(rng)).collect())
            .collect();
        Ok(VariableBatch { batch_id, variables })
    }

    pub fn nu(&self) -> usize {
        self.variables.len()
    }

    pub fn symbols_per_packet(&self) -> usize {
        self.variables[0].len()
    }

    /// The coded packet with the given coefficient vector.
    pub fn combine(&self, field: &FieldSpec, coefficients: Vec<Fe>) -> CodedPacket {
        assert_eq!(coefficients.len(), self.nu());
        let width = self.symbols_per_packet();
        let mut payload = vec![Fe::ZERO; width];
        for (c, var) in coefficients.iter().zip(&self.variables) {
            if *c == Fe::ZERO {
                continue;
            }
            for (p, s) in payload.iter_mut().zip(var) {
                *p = field.add(*p, field.mul(*c, *s));
            }
        }
        CodedPacket { batch_id: self.batch_id, coefficients, payload, release_time: None }
    }
}

/// One coded packet: the coefficient vector in the variable basis plus the
/// combined payload. `release_time` gates forwarding for freshly seeded
/// packets; `None` means forwardable immediately.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedPacket {
    pub batch_id: u64,
    pub coefficients: Vec<Fe>,
    pub payload: Vec<Fe>,
    pub release_time: Option<f64>,
}

impl CodedPacket {
    pub fn nu(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|c| *c == Fe::ZERO)
    }
}

/// Coding header cost in bits: one field symbol per coefficient plus one
/// variable identifier per slot.
pub fn header_overhead_bits(nu: usize, k: u32, id_bits: u32) -> u64 {
    nu as u64 * (k as u64 + id_bits as u64)
}

/// Outcome of offering a packet to a buffer.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    /// Rank grew by one; the packet is stored.
    Stored,
    /// The packet lies in the span of stored rows; nothing changes.
    Redundant,
    /// The packet is innovative but the buffer is at capacity.
    Full,
}

#[derive(Clone, Debug)]
struct EchelonRow {
    coefficients: Vec<Fe>,
    payload: Vec<Fe>,
}

/// Packet store with incremental Gaussian elimination. `rows` keeps the
/// packets as received; `echelon[p]` caches a row with pivot column `p`,
/// leading coefficient normalized to one. rank == rows.len() always, because
/// redundant packets are never stored.
#[derive(Clone, Debug)]
pub struct Buffer {
    nu: usize,
    capacity: usize,
    batch_id: Option<u64>,
    rows: Vec<CodedPacket>,
    echelon: Vec<Option<EchelonRow>>,
}

impl Buffer {
    pub fn new(nu: usize, capacity: usize) -> Buffer {
        Buffer { nu, capacity, batch_id: None, rows: Vec::new(), echelon: vec![None; nu] }
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rank(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank() == self.nu
    }

    pub fn rows(&self) -> &[CodedPacket] {
        &self.rows
    }

    pub fn batch_id(&self) -> Option<u64> {
        self.batch_id
    }

    pub fn clear(&mut self) {
        self.batch_id = None;
        self.rows.clear();
        self.echelon.iter_mut().for_each(|r| *r = None);
    }

    fn check(&self, pkt: &CodedPacket) -> Result<(), CodingError> {
        if pkt.coefficients.len() != self.nu {
            return Err(CodingError::CoefficientArity { got: pkt.coefficients.len(), want: self.nu });
        }
        if let Some(id) = self.batch_id {
            if pkt.batch_id != id {
                return Err(CodingError::BatchMismatch { got: pkt.batch_id, want: id });
            }
        }
        if let Some(first) = self.rows.first() {
            if pkt.payload.len() != first.payload.len() {
                return Err(CodingError::PayloadArity {
                    got: pkt.payload.len(),
                    want: first.payload.len(),
                });
            }
        }
        Ok(())
    }

    /// Eliminate known pivots from a packet; what is left is zero iff the
    /// packet lies in the span of the buffer.
    fn residual(&self, field: &FieldSpec, pkt: &CodedPacket) -> (Vec<Fe>, Vec<Fe>) {
        let mut coeffs = pkt.coefficients.clone();
        let mut payload = pkt.payload.clone();
        for p in 0..self.nu {
            if coeffs[p] == Fe::ZERO {
                continue;
            }
            if let Some(row) = &self.echelon[p] {
                let factor = coeffs[p];
                for (c, rc) in coeffs.iter_mut().zip(&row.coefficients) {
                    *c = field.add(*c, field.mul(factor, *rc));
                }
                for (s, rs) in payload.iter_mut().zip(&row.payload) {
                    *s = field.add(*s, field.mul(factor, *rs));
                }
            }
        }
        (coeffs, payload)
    }

    /// Whether the packet would raise the rank. Non-mutating.
    pub fn is_innovative(&self, field: &FieldSpec, pkt: &CodedPacket) -> Result<bool, CodingError> {
        self.check(pkt)?;
        let (coeffs, _) = self.residual(field, pkt);
        Ok(coeffs.iter().any(|c| *c != Fe::ZERO))
    }

    pub fn insert(&mut self, field: &FieldSpec, pkt: CodedPacket) -> Result<InsertOutcome, CodingError> {
        self.check(&pkt)?;
        let (mut coeffs, mut payload) = self.residual(field, &pkt);
        let pivot = match coeffs.iter().position(|c| *c != Fe::ZERO) {
            None => return Ok(InsertOutcome::Redundant),
            Some(p) => p,
        };
        if self.rows.len() == self.capacity {
            return Ok(InsertOutcome::Full);
        }
        let lead_inv = field.inv(coeffs[pivot]).expect("pivot is nonzero");
        for c in coeffs.iter_mut() {
            *c = field.mul(*c, lead_inv);
        }
        for s in payload.iter_mut() {
            *s = field.mul(*s, lead_inv);
        }
        self.echelon[pivot] = Some(EchelonRow { coefficients: coeffs, payload });
        self.batch_id = Some(pkt.batch_id);
        self.rows.push(pkt);
        Ok(InsertOutcome::Stored)
    }

    /// Random linear combination over the stored rows, coefficients uniform
    /// over the whole field. May come out zero or redundant for the receiver;
    /// it is the caller's job to transmit it regardless. `None` when empty.
    pub fn random_combination(
        &self,
        field: &FieldSpec,
        rng: &mut impl rand::Rng,
    ) -> Option<CodedPacket> {
        let first = self.rows.first()?;
        let mut coeffs = vec![Fe::ZERO; self.nu];
        let mut payload = vec![Fe::ZERO; first.payload.len()];
        for row in &self.rows {
            let w = field.random(rng);
            if w == Fe::ZERO {
                continue;
            }
            for (c, rc) in coeffs.iter_mut().zip(&row.coefficients) {
                *c = field.add(*c, field.mul(w, *rc));
            }
            for (s, rs) in payload.iter_mut().zip(&row.payload) {
                *s = field.add(*s, field.mul(w, *rs));
            }
        }
        Some(CodedPacket {
            batch_id: first.batch_id,
            coefficients: coeffs,
            payload,
            release_time: None,
        })
    }

    /// Recover the original variables; needs full rank. Back-substitutes the
    /// echelon into reduced form and reads the payload rows off the identity.
    pub fn decode(&self, field: &FieldSpec) -> Result<Vec<Vec<Fe>>, CodingError> {
        if self.rank() != self.nu {
            return Err(CodingError::RankDeficient { got: self.rank(), want: self.nu });
        }
        let mut work: Vec<EchelonRow> = (0..self.nu)
            .map(|p| self.echelon[p].clone().expect("full rank fills every pivot"))
            .collect();
        for p in (0..self.nu).rev() {
            let (lower, upper) = work.split_at_mut(p);
            let src = &upper[0];
            for row in lower.iter_mut() {
                let factor = row.coefficients[p];
                if factor == Fe::ZERO {
                    continue;
                }
                for (c, rc) in row.coefficients.iter_mut().zip(&src.coefficients) {
                    *c = field.add(*c, field.mul(factor, *rc));
                }
                for (s, rs) in row.payload.iter_mut().zip(&src.payload) {
                    *s = field.add(*s, field.mul(factor, *rs));
                }
            }
        }
        Ok(work.into_iter().map(|r| r.payload).collect())
    }
}

/// The source's initial encoding: `nu` coded packets whose coefficient matrix
/// is invertible, found by redrawing the whole matrix until it has full rank.
pub fn encode_batch(
    batch: &VariableBatch,
    field: &FieldSpec,
    rng: &mut impl rand::Rng,
) -> Vec<CodedPacket> {
    let nu = batch.nu();
    loop {
        let matrix: Vec<Vec<Fe>> = (0..nu)
            .map(|_| (0..nu).map(|_| field.random(rng)).collect())
            .collect();
        let mut probe = Buffer::new(nu, nu);
        let mut ok = true;
        for row in &matrix {
            let pkt = CodedPacket {
                batch_id: batch.batch_id,
                coefficients: row.clone(),
                payload: Vec::new(),
                release_time: None,
            };
            if probe.insert(field, pkt).expect("probe accepts matching arity") != InsertOutcome::Stored {
                ok = false;
                break;
            }
        }
        if ok {
            return matrix.into_iter().map(|row| batch.combine(field, row)).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Independent rank oracle: textbook Gaussian elimination over a fresh
    /// copy of the coefficient rows, no shared code with Buffer.
    fn rank_oracle(field: &FieldSpec, rows: &[Vec<Fe>]) -> usize {
        let mut m: Vec<Vec<Fe>> = rows.to_vec();
        let cols = m.first().map_or(0, |r| r.len());
        let mut rank = 0;
        for col in 0..cols {
            let pivot = (rank..m.len()).find(|&r| m[r][col] != Fe::ZERO);
            let Some(pivot) = pivot else { continue };
            m.swap(rank, pivot);
            let inv = field.inv(m[rank][col]).unwrap();
            for c in 0..cols {
                m[rank][c] = field.mul(m[rank][c], inv);
            }
            for r in 0..m.len() {
                if r != rank && m[r][col] != Fe::ZERO {
                    let f = m[r][col];
                    for c in 0..cols {
                        let sub = field.mul(f, m[rank][c]);
                        m[r][c] = field.add(m[r][c], sub);
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    fn packet(batch_id: u64, coeffs: &[u16], payload: &[u16]) -> CodedPacket {
        CodedPacket {
            batch_id,
            coefficients: coeffs.iter().map(|&c| Fe(c)).collect(),
            payload: payload.iter().map(|&s| Fe(s)).collect(),
            release_time: None,
        }
    }

    #[test]
    fn encode_produces_invertible_matrix_even_at_q2() {
        let field = FieldSpec::new(1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let batch = VariableBatch::random(0, 3, 3, &field, &mut rng).unwrap();
            let packets = encode_batch(&batch, &field, &mut rng);
            assert_eq!(packets.len(), 3);
            let rows: Vec<Vec<Fe>> = packets.iter().map(|p| p.coefficients.clone()).collect();
            assert_eq!(rank_oracle(&field, &rows), 3);
        }
    }

    #[test]
    fn incremental_rank_matches_elimination_oracle() {
        let field = FieldSpec::new(4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..200 {
            let nu = 5;
            let mut buf = Buffer::new(nu, nu);
            let mut offered: Vec<Vec<Fe>> = Vec::new();
            for _ in 0..8 {
                let coeffs: Vec<Fe> = (0..nu).map(|_| field.random(&mut rng)).collect();
                let pkt = CodedPacket {
                    batch_id: 9,
                    coefficients: coeffs.clone(),
                    payload: vec![Fe::ZERO],
                    release_time: None,
                };
                offered.push(coeffs);
                let _ = buf.insert(&field, pkt).unwrap();
                assert_eq!(buf.rank(), rank_oracle(&field, &offered));
                assert_eq!(buf.rank(), buf.rows().len());
            }
        }
    }

    #[test]
    fn decode_round_trips() {
        let field = FieldSpec::new(8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let batch = VariableBatch::random(4, 8, 64, &field, &mut rng).unwrap();
            let packets = encode_batch(&batch, &field, &mut rng);
            let mut buf = Buffer::new(8, 8);
            for p in packets {
                assert_eq!(buf.insert(&field, p).unwrap(), InsertOutcome::Stored);
            }
            assert!(buf.is_full_rank());
            assert_eq!(buf.decode(&field).unwrap(), batch.variables);
        }
    }

    #[test]
    fn decode_short_of_full_rank_is_refused() {
        let field = FieldSpec::new(8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let batch = VariableBatch::random(0, 4, 8, &field, &mut rng).unwrap();
        let packets = encode_batch(&batch, &field, &mut rng);
        let mut buf = Buffer::new(4, 4);
        for p in packets.into_iter().take(3) {
            buf.insert(&field, p).unwrap();
        }
        assert_eq!(buf.decode(&field), Err(CodingError::RankDeficient { got: 3, want: 4 }));
    }

    #[test]
    fn span_membership_is_detected() {
        let field = FieldSpec::new(8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let batch = VariableBatch::random(0, 4, 8, &field, &mut rng).unwrap();
        let packets = encode_batch(&batch, &field, &mut rng);
        let mut buf = Buffer::new(4, 4);
        for p in packets.into_iter().take(2) {
            buf.insert(&field, p).unwrap();
        }
        // every combination drawn from the stored rows stays in their span
        for _ in 0..100 {
            let combo = buf.random_combination(&field, &mut rng).unwrap();
            assert!(!buf.is_innovative(&field, &combo).unwrap());
            let mut probe = buf.clone();
            assert_eq!(probe.insert(&field, combo).unwrap(), InsertOutcome::Redundant);
        }
    }

    #[test]
    fn full_rank_source_innovates_fresh_receiver_unless_zero_drawn() {
        let field = FieldSpec::new(16).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let batch = VariableBatch::random(0, 4, 16, &field, &mut rng).unwrap();
        let packets = encode_batch(&batch, &field, &mut rng);
        let mut source = Buffer::new(4, 4);
        for p in packets {
            source.insert(&field, p).unwrap();
        }
        let receiver = Buffer::new(4, 4);
        let trials = 10_000u32;
        let mut innovative = 0u32;
        for _ in 0..trials {
            let combo = source.random_combination(&field, &mut rng).unwrap();
            if receiver.is_innovative(&field, &combo).unwrap() {
                innovative += 1;
            }
        }
        let q = field.q() as f64;
        let p = 1.0 - 1.0 / q;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!(innovative as f64 / trials as f64 >= p - 3.0 * sigma);
    }

    #[test]
    fn capacity_is_enforced() {
        let field = FieldSpec::new(2).unwrap();
        let mut buf = Buffer::new(3, 2);
        buf.insert(&field, packet(0, &[1, 0, 0], &[0])).unwrap();
        buf.insert(&field, packet(0, &[0, 1, 0], &[0])).unwrap();
        assert_eq!(buf.insert(&field, packet(0, &[0, 0, 1], &[0])).unwrap(), InsertOutcome::Full);
        assert_eq!(buf.rank(), 2);
    }

    #[test]
    fn arity_and_batch_mismatches_are_errors() {
        let field = FieldSpec::new(2).unwrap();
        let mut buf = Buffer::new(3, 3);
        buf.insert(&field, packet(0, &[1, 0, 0], &[0])).unwrap();
        assert!(matches!(
            buf.insert(&field, packet(0, &[1, 0], &[0])),
            Err(CodingError::CoefficientArity { got: 2, want: 3 })
        ));
        assert!(matches!(
            buf.insert(&field, packet(1, &[0, 1, 0], &[0])),
            Err(CodingError::BatchMismatch { got: 1, want: 0 })
        ));
        assert!(matches!(
            buf.insert(&field, packet(0, &[0, 1, 0], &[0, 0])),
            Err(CodingError::PayloadArity { got: 2, want: 1 })
        ));
    }

    #[test]
    fn header_overhead_examples() {
        assert_eq!(header_overhead_bits(10, 8, 16), 240);
        assert_eq!(header_overhead_bits(1, 1, 0), 1);
        // ten-kilobit packets carry 2.4% coding overhead in the first setup
        assert!((header_overhead_bits(10, 8, 16) as f64 / 10_000.0 - 0.024).abs() < 1e-12);
    }

    #[test]
    fn batch_validation() {
        let field = FieldSpec::new(8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        assert_eq!(
            VariableBatch::random(0, 0, 8, &field, &mut rng).unwrap_err(),
            CodingError::EmptyBatch
        );
        assert_eq!(
            VariableBatch::random(0, 2, 12, &field, &mut rng).unwrap_err(),
            CodingError::BadPacketBits { bits: 12, k: 8 }
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_roundtrip_small(nu in 1usize..5, k in prop::sample::select(vec![1u32, 4, 8]), seed in 0u64..500) {
            let field = FieldSpec::new(k).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let batch = VariableBatch::random(0, nu, 2 * k, &field, &mut rng).unwrap();
            let packets = encode_batch(&batch, &field, &mut rng);
            let mut buf = Buffer::new(nu, nu);
            for p in packets {
                prop_assert_eq!(buf.insert(&field, p).unwrap(), InsertOutcome::Stored);
            }
            prop_assert_eq!(buf.decode(&field).unwrap(), batch.variables);
        }

        #[test]
        fn prop_rank_never_exceeds_bounds(seed in 0u64..1000) {
            let field = FieldSpec::new(2).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let nu = 4;
            let mut buf = Buffer::new(nu, 3);
            for _ in 0..12 {
                let coeffs: Vec<Fe> = (0..nu).map(|_| field.random(&mut rng)).collect();
                let pkt = CodedPacket { batch_id: 0, coefficients: coeffs, payload: vec![Fe::ZERO], release_time: None };
                let _ = buf.insert(&field, pkt).unwrap();
                prop_assert!(buf.rank() <= 3);
                prop_assert_eq!(buf.rank(), buf.rows().len());
            }
        }
    }
}
