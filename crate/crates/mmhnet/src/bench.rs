//! Wall-clock scaling of the SSM kernels.

use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Result};
use mmhnet_core::rng::{normal_tensor, seeded};
use mmhnet_core::ssm::{noncausal_fast, scan_causal, ssd_matrix_form, MixerMode, SsmParams};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// Non-causal path through the global state, `O(L)`.
    NonCausal,
    /// Causal recurrence, `O(L)`.
    Causal,
    /// Dense masked matrix form, `O(L²)`.
    Dense,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::NonCausal, Kernel::Causal, Kernel::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Self::NonCausal => "noncausal_fast",
            Self::Causal => "causal_scan",
            Self::Dense => "dense_mask",
        }
    }
}

impl FromStr for Kernel {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "noncausal_fast" | "noncausal" => Self::NonCausal,
            "causal_scan" | "causal" => Self::Causal,
            "dense_mask" | "dense" => Self::Dense,
            _ => bail!("unknown kernel `{s}` (expected noncausal_fast, causal_scan or dense_mask)"),
        })
    }
}

pub const STATE_DIM: usize = 8;
/// Longest length timed for the dense path, whose `L × L` mask would not fit
/// in memory much beyond this.
pub const DENSE_MAX_LEN: usize = 8192;
pub const CHANNELS: usize = 8;

fn instance(len: usize, seed: u64) -> Result<(SsmParams, mmhnet_core::Tensor)> {
    let mut rng = seeded(seed);
    let a: Vec<f64> = (0..len).map(|_| -rng.random_range(0.1..2.0)).collect();
    let delta: Vec<f64> = (0..len).map(|_| rng.random_range(0.01..0.1)).collect();
    let b = normal_tensor(&mut rng, len, STATE_DIM, 1.0);
    let c = normal_tensor(&mut rng, len, STATE_DIM, 1.0);
    let x = normal_tensor(&mut rng, len, CHANNELS, 1.0);
    Ok((SsmParams::new(a, delta, b, c)?, x))
}

/// Shortest wall time of one timed repetition; fast kernels are looped
/// until a repetition lasts this long.
pub const MIN_REP_SECONDS: f64 = 0.02;

/// Median seconds per call over `reps` timed repetitions after a warmup
/// that also sizes the inner loop.
pub fn time_kernel(kernel: Kernel, len: usize, reps: usize) -> Result<f64> {
    let (p, x) = instance(len, len as u64)?;
    let call = || -> Result<()> {
        let y = match kernel {
            Kernel::NonCausal => noncausal_fast(&p, &x)?,
            Kernel::Causal => scan_causal(&p, &x)?,
            Kernel::Dense => ssd_matrix_form(&p, &x, MixerMode::NonCausal)?,
        };
        std::hint::black_box(&y);
        Ok(())
    };
    let t = Instant::now();
    call()?;
    let once = t.elapsed().as_secs_f64();
    let inner = ((MIN_REP_SECONDS / once.max(1e-9)).ceil() as usize).max(1);
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        for _ in 0..inner {
            call()?;
        }
        times.push(t.elapsed().as_secs_f64() / inner as f64);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub length: usize,
    pub seconds: f64,
    /// `time(L) / time(L/2)` when the previous length was half this one.
    pub ratio: Option<f64>,
}

/// Dense lengths above [`DENSE_MAX_LEN`] are skipped.
pub fn run(kernels: &[Kernel], lengths: &[usize], reps: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &k in kernels {
        let mut prev: Option<(usize, f64)> = None;
        for &l in lengths {
            if k == Kernel::Dense && l > DENSE_MAX_LEN {
                continue;
            }
            let s = time_kernel(k, l, reps)?;
            let ratio = prev.filter(|&(pl, _)| 2 * pl == l).map(|(_, ps)| s / ps);
            rows.push(BenchRow { kernel: k, length: l, seconds: s, ratio });
            prev = Some((l, s));
        }
    }
    Ok(rows)
}
