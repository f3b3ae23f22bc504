//! Multiply-accumulate and elementwise-op counters for the primitives.
//!
//! These companions count exactly the multiplies the forward loops perform
//! (dense ops) and one operation per output element (elementwise ops, the
//! convention used for nonlinearities). The instrumented forward sums them
//! at each call site with runtime shapes; the closed-form cost model must
//! reproduce the totals independently from config alone.

/// Tally of one named layer during an instrumented forward.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpTally {
    pub macs: u64,
    pub elementwise: u64,
}

/// Accumulates per-layer tallies in call order.
#[derive(Debug, Clone, Default)]
pub struct CostTally {
    pub rows: Vec<(String, OpTally)>,
}

impl CostTally {
    pub fn add_macs(&mut self, name: &str, macs: u64) {
        self.entry(name).macs += macs;
    }

    pub fn add_elementwise(&mut self, name: &str, count: u64) {
        self.entry(name).elementwise += count;
    }

    fn entry(&mut self, name: &str) -> &mut OpTally {
        if let Some(pos) = self.rows.iter().position(|(n, _)| n == name) {
            return &mut self.rows[pos].1;
        }
        self.rows.push((name.to_string(), OpTally::default()));
        &mut self.rows.last_mut().unwrap().1
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|(_, t)| t.macs).sum()
    }

    pub fn total_elementwise(&self) -> u64 {
        self.rows.iter().map(|(_, t)| t.elementwise).sum()
    }
}

pub fn conv1x1_macs(b: usize, cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    (b * h * w * cin * cout) as u64
}

/// Valid kernel taps along one padded axis of extent `e`: border rows see a
/// truncated kernel, so the per-axis tap total is `3e - 2` (or 1 when e == 1).
pub fn taps3(e: usize) -> u64 {
    if e >= 2 {
        (3 * e - 2) as u64
    } else {
        1
    }
}

pub fn conv3x3_macs(b: usize, cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    (b * cin * cout) as u64 * taps3(h) * taps3(w)
}

pub fn dwconv3x3_macs(b: usize, c: usize, h: usize, w: usize) -> u64 {
    (b * c) as u64 * taps3(h) * taps3(w)
}

pub fn linear_macs(rows: usize, din: usize, dout: usize) -> u64 {
    (rows * din * dout) as u64
}

pub fn bmm_macs(b: usize, m: usize, k: usize, n: usize) -> u64 {
    (b * m * k * n) as u64
}
