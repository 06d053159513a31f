//! Simulation and analysis library for coded broadcast over intermittently
//! connected networks.
//!
//! The pieces, bottom up:
//!
//! * [`gf`]: arithmetic in GF(2^k) for k up to 16.
//! * [`coding`]: random linear coding of packet batches and the incremental
//!   rank-tracking buffer nodes decode with.
//! * [`mobility`]: the contact process (superposed Poisson pair meetings),
//!   trace files, and streaming generation.
//! * [`bloom`]: the counting Bloom filter peers can exchange as buffer
//!   summaries.
//! * [`protocols`]: the broadcast protocols themselves, from blind
//!   recombination to feedback forwarding, pre-placed benchmarks, and the
//!   pipelined schedule that seeds the next batch while one propagates.
//! * [`metrics`]: densities, spread entropy, contact efficiency, seeding
//!   statistics, and tail bounds on propagation time.

pub mod bloom;
pub mod coding;
pub mod gf;
pub mod metrics;
pub mod mobility;
pub mod oracle;
pub mod protocols;
