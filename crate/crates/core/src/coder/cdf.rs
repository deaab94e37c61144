use crate::entropy::laplace::{laplace_cdf, laplace_mass, MIN_LOG_SCALE};

/// Fixed-point precision of every table.
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
/// Default latent support `[-L, L]`.
pub const SUPPORT: i32 = 64;
/// Steps per unit for the parameter grid shared by encoder and decoder.
pub const PARAM_STEPS: f32 = 256.0;

/// `(μ, σ)` snapped to the `1/256` grid, as integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantParams {
    pub mu: i32,
    pub log_scale: i32,
}

impl QuantParams {
    pub fn new(mu: f32, log_scale: f32) -> Self {
        let q = |v: f32, lo: f32, hi: f32| (v.clamp(lo, hi) * PARAM_STEPS).round() as i32;
        QuantParams {
            mu: q(mu, -1.0e4, 1.0e4),
            log_scale: q(log_scale, MIN_LOG_SCALE as f32, 20.0),
        }
    }

    pub fn mu(self) -> f64 {
        self.mu as f64 / PARAM_STEPS as f64
    }

    pub fn log_scale(self) -> f64 {
        self.log_scale as f64 / PARAM_STEPS as f64
    }
}

/// Frequencies for symbols `-L..=L` followed by one escape slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    support: i32,
    /// `cum[i]` is the start of slot `i`; `cum[last] == TOTAL`.
    cum: Vec<u32>,
}

impl CdfTable {
    pub fn support(&self) -> i32 {
        self.support
    }

    pub fn slots(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn escape_slot(&self) -> usize {
        self.slots() - 1
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    /// `(start, freq)` of a slot.
    #[inline]
    pub fn range(&self, slot: usize) -> (u32, u32) {
        (self.cum[slot], self.cum[slot + 1] - self.cum[slot])
    }

    pub fn freq(&self, slot: usize) -> u32 {
        self.range(slot).1
    }

    /// Slot of an in-support value, or `None` when it must be escaped.
    #[inline]
    pub fn slot_of(&self, v: i32) -> Option<usize> {
        (-self.support..=self.support).contains(&v).then(|| (v + self.support) as usize)
    }

    pub fn value_of(&self, slot: usize) -> i32 {
        slot as i32 - self.support
    }

    /// Slot whose interval contains `target`.
    #[inline]
    pub fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Builds the table for a discretized Laplacian. Every slot gets at least
/// one unit; the remaining units are split in proportion to the bin masses
/// by largest remainder, ties going to the lower index.
pub fn build_cdf(params: QuantParams, support: i32) -> CdfTable {
    assert!(support >= 1, "support must be at least 1");
    let (mu, s) = (params.mu(), params.log_scale());
    let n = (2 * support + 1) as usize;
    let mut mass = Vec::with_capacity(n + 1);
    for i in 0..n {
        mass.push(laplace_mass((i as i32 - support) as f64, mu, s));
    }
    let lo = laplace_cdf(-support as f64 - 0.5, mu, s);
    let hi = 1.0 - laplace_cdf(support as f64 + 0.5, mu, s);
    mass.push((lo + hi).max(0.0));
    let total_mass: f64 = mass.iter().sum();
    let spare = (TOTAL - mass.len() as u32) as f64;

    let mut freq = Vec::with_capacity(mass.len());
    let mut rema = Vec::with_capacity(mass.len());
    let mut used = 0u32;
    for (i, m) in mass.iter().enumerate() {
        let share = m / total_mass * spare;
        let whole = share.floor();
        freq.push(1 + whole as u32);
        used += 1 + whole as u32;
        rema.push((share - whole, i));
    }
    let left = (TOTAL - used) as usize;
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(left) {
        freq[i] += 1;
    }

    let mut cum = Vec::with_capacity(freq.len() + 1);
    let mut acc = 0;
    cum.push(0);
    for f in freq {
        acc += f;
        cum.push(acc);
    }
    debug_assert_eq!(acc, TOTAL);
    CdfTable { support, cum }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mode_at_zero_for_centered_table() {
        let t = build_cdf(QuantParams::new(0.0, 0.0), 8);
        let zero = t.slot_of(0).unwrap();
        for i in 0..t.slots() {
            if i != zero {
                assert!(t.freq(i) < t.freq(zero));
            }
        }
    }

    #[test]
    fn narrowest_table_keeps_every_slot() {
        let t = build_cdf(QuantParams::new(0.3, -10.0), SUPPORT);
        assert!((0..t.slots()).all(|i| t.freq(i) >= 1));
        assert_eq!(*t.cum().last().unwrap(), TOTAL);
        assert_eq!(t.freq(t.slot_of(0).unwrap()), TOTAL - (t.slots() as u32 - 1));
    }

    #[test]
    fn identical_inputs_identical_tables() {
        let q = QuantParams::new(1.234, -0.77);
        assert_eq!(build_cdf(q, SUPPORT), build_cdf(q, SUPPORT));
    }

    #[test]
    fn lookup_inverts_ranges() {
        let t = build_cdf(QuantParams::new(-2.5, 1.0), 16);
        for slot in 0..t.slots() {
            let (start, f) = t.range(slot);
            assert_eq!(t.lookup(start), slot);
            assert_eq!(t.lookup(start + f - 1), slot);
        }
    }

    #[test]
    fn wide_table_has_escape_mass() {
        let t = build_cdf(QuantParams::new(0.0, 4.0), 8);
        assert!(t.freq(t.escape_slot()) > TOTAL / 4);
    }

    proptest! {
        #[test]
        fn tables_are_strictly_increasing_and_complete(mu in -80.0f32..80.0, s in -12.0f32..8.0, l in 1i32..70) {
            let t = build_cdf(QuantParams::new(mu, s), l);
            prop_assert_eq!(t.slots(), (2 * l + 2) as usize);
            prop_assert_eq!(t.cum()[0], 0);
            prop_assert_eq!(*t.cum().last().unwrap(), TOTAL);
            prop_assert!(t.cum().windows(2).all(|w| w[1] > w[0]));
        }
    }
}
