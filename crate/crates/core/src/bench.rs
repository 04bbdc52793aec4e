//! Forward latency and multiply-accumulate accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Builder, Cfe, CfeConfig, Module};
use crate::network::{ArchConfig, ArchVariant, Detector};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iterations: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

pub fn latency_stats(samples_ms: &[f64]) -> Result<LatencyStats> {
    if samples_ms.is_empty() {
        return Err(Error::invalid("latency statistics need at least one sample"));
    }
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let rank = ((0.95 * n as f64).ceil() as usize).max(1);
    Ok(LatencyStats {
        iterations: n,
        mean_ms: s.iter().sum::<f64>() / n as f64,
        median_ms: median,
        p95_ms: s[rank - 1],
        min_ms: s[0],
        max_ms: s[n - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantBench {
    pub variant: ArchVariant,
    pub input_size: usize,
    pub params: usize,
    /// Per image.
    pub macs: u64,
    pub latency: LatencyStats,
}

/// Times `iterations` single-image inference passes after one warm-up pass.
pub fn bench_variant(config: &ArchConfig, iterations: usize, seed: u64) -> Result<VariantBench> {
    if iterations == 0 {
        return Err(Error::invalid("iterations must be positive"));
    }
    config.validate()?;
    let det = Detector::<f32>::new(config, seed)?;
    let s = config.input_size;
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let input = Tensor::from_fn([1, 3, s, s], |_, _, _, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 40) as f32 / (1u64 << 24) as f32
    });
    det.forward_features(&input)?;
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        std::hint::black_box(det.forward_features(&input)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(VariantBench {
        variant: config.variant,
        input_size: s,
        params: det.num_params(),
        macs: det.net.macs(1)?,
        latency: latency_stats(&times)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    /// Channels entering the CFE block.
    pub channels: usize,
    /// Width of the separable stage.
    pub inner_channels: usize,
    pub k: usize,
    pub feature_size: usize,
    /// `1×k` plus `k×1` stage of one branch.
    pub spatial_factorized: u64,
    /// A dense `k×k` convolution at the same widths.
    pub spatial_dense: u64,
    pub spatial_ratio: f64,
    /// Whole branch including its `1×1` reduce and expand convolutions.
    pub branch_factorized: u64,
    pub branch_dense: u64,
}

/// Counts one CFE branch as built against its dense `k×k` equivalent on a
/// single `channels × size × size` feature map.
pub fn cfe_factorization(channels: usize, k: usize, size: usize) -> Result<FactorizationReport> {
    let mut store = ParamStore::<f32>::new();
    let mut b = Builder::new(&mut store, 0);
    let config = CfeConfig { k, ..CfeConfig::new(channels) };
    let cfe = Cfe::new(&mut b, "cfe", config)?;
    let shape = [1, channels, size, size];
    let (_, reduced) = cfe.left[0].macs(shape)?;
    let (sep_a, mid) = cfe.left[1].macs(reduced)?;
    let (sep_b, _) = cfe.left[2].macs(mid)?;
    let inner = reduced[1];
    let spatial_dense = (size * size * inner * inner * k * k) as u64;
    let spatial_factorized = sep_a + sep_b;
    Ok(FactorizationReport {
        channels,
        inner_channels: inner,
        k,
        feature_size: size,
        spatial_factorized,
        spatial_dense,
        spatial_ratio: spatial_factorized as f64 / spatial_dense as f64,
        branch_factorized: cfe.branch_macs(crate::layers::Branch::Left, shape)?,
        branch_dense: cfe.unfactorized_branch_macs(shape)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub variants: Vec<VariantBench>,
    pub factorization: FactorizationReport,
}

/// Benchmarks every variant at `base`'s size and widths.
pub fn bench_all(base: &ArchConfig, iterations: usize, seed: u64) -> Result<BenchReport> {
    let variants = ArchVariant::ALL
        .iter()
        .map(|&v| bench_variant(&ArchConfig { variant: v, ..base.clone() }, iterations, seed))
        .collect::<Result<Vec<_>>>()?;
    let stride8 = base.input_size / 8;
    Ok(BenchReport {
        iterations,
        variants,
        factorization: cfe_factorization(base.widths[0], base.k, stride8)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_known_samples() {
        let s = latency_stats(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((s.mean_ms, s.median_ms, s.p95_ms, s.min_ms, s.max_ms), (3.0, 3.0, 5.0, 1.0, 5.0));
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        let s = latency_stats(&v).unwrap();
        assert_eq!((s.median_ms, s.p95_ms), (10.5, 19.0));
        assert!(latency_stats(&[]).is_err());
    }

    #[test]
    fn factorized_spatial_stage_is_two_sevenths() {
        for c in [16, 32, 64] {
            let r = cfe_factorization(c, 7, 8).unwrap();
            let inner = (c / 2) as u64;
            assert_eq!(r.spatial_factorized, 2 * 7 * inner * inner * 64);
            assert_eq!(r.spatial_dense, 49 * inner * inner * 64);
            assert_eq!(r.spatial_factorized * 7, r.spatial_dense * 2);
            assert!(r.branch_factorized < r.branch_dense);
        }
    }
}
