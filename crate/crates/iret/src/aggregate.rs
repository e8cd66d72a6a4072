//! Feature-map aggregation: collapse a dense C×H×W activation grid into a
//! compact C-dimensional global descriptor.
//!
//! Five operators are provided: MAC (spatial max), SPoC (spatial mean),
//! GeM (generalized p-mean), R-MAC (normalized sum of regional MACs) and
//! CroW (cross-dimensionally weighted sum). All are pure functions with a
//! fixed summation order (channel-major, then row-major spatial) so results
//! are reproducible bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};

const FMAP_MAGIC: &[u8; 8] = b"IRFMAPV1";

/// Dense convolutional activation grid, indexed (c, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(
                "feature map dimensions must be >= 1".into(),
            ));
        }
        if values.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "feature map expects {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite feature map value".into()));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> f64 {
        self.values[(c * self.height + h) * self.width + w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn spatial(&self) -> usize {
        self.height * self.width
    }

    /// Read a feature map from the `IRFMAPV1` binary format.
    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        binio::expect_magic(&mut r, FMAP_MAGIC, path)?;
        let c = binio::read_u32(&mut r, path)? as usize;
        let h = binio::read_u32(&mut r, path)? as usize;
        let w = binio::read_u32(&mut r, path)? as usize;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::malformed(path, "zero dimension"));
        }
        let values = binio::read_f32_vec(&mut r, c * h * w, path)?;
        FeatureMap::new(c, h, w, values)
    }

    /// Write in the `IRFMAPV1` binary format (values narrowed to f32 LE).
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(FMAP_MAGIC).map_err(|e| Error::io(path, e))?;
        binio::write_u32(&mut w, self.channels as u32, path)?;
        binio::write_u32(&mut w, self.height as u32, path)?;
        binio::write_u32(&mut w, self.width as u32, path)?;
        binio::write_f32_slice(&mut w, &self.values, path)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Fixed-length real vector representing one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    /// True iff the vector has unit L2 norm within 1e-6.
    pub normalized: bool,
}

impl Descriptor {
    pub fn raw(values: Vec<f64>) -> Self {
        Descriptor {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Which aggregation operator to apply, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Mac,
    Spoc,
    Gem,
    Rmac,
    Crow,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 5] = [
        AggregatorKind::Mac,
        AggregatorKind::Spoc,
        AggregatorKind::Gem,
        AggregatorKind::Rmac,
        AggregatorKind::Crow,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::Mac => "mac",
            AggregatorKind::Spoc => "spoc",
            AggregatorKind::Gem => "gem",
            AggregatorKind::Rmac => "rmac",
            AggregatorKind::Crow => "crow",
        }
    }
}

impl std::str::FromStr for AggregatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mac" => Ok(AggregatorKind::Mac),
            "spoc" => Ok(AggregatorKind::Spoc),
            "gem" => Ok(AggregatorKind::Gem),
            "rmac" => Ok(AggregatorKind::Rmac),
            "crow" => Ok(AggregatorKind::Crow),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregator '{other}' (expected mac|spoc|gem|rmac|crow)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub gem_p: f64,
    pub rmac_levels: usize,
    pub rmac_overlap: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            kind: AggregatorKind::Gem,
            gem_p: 3.0,
            rmac_levels: 3,
            rmac_overlap: 0.4,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gem_p <= 0.0 || !self.gem_p.is_finite() {
            return Err(Error::InvalidArgument("gem_p must be > 0".into()));
        }
        if self.rmac_levels < 1 {
            return Err(Error::InvalidArgument("rmac_levels must be >= 1".into()));
        }
        if !(self.rmac_overlap > 0.0 && self.rmac_overlap < 1.0) {
            return Err(Error::InvalidArgument(
                "rmac_overlap must be in (0,1)".into(),
            ));
        }
        Ok(())
    }

    /// Dispatch to the configured operator.
    pub fn aggregate(&self, fm: &FeatureMap) -> Result<Descriptor> {
        self.validate()?;
        match self.kind {
            AggregatorKind::Mac => Ok(mac(fm)),
            AggregatorKind::Spoc => Ok(spoc(fm)),
            AggregatorKind::Gem => gem(fm, self.gem_p),
            AggregatorKind::Rmac => rmac(fm, self),
            AggregatorKind::Crow => Ok(crow(fm)),
        }
    }
}

/// MAC: per-channel spatial maximum.
pub fn mac(fm: &FeatureMap) -> Descriptor {
    let mut out = Vec::with_capacity(fm.channels);
    for c in 0..fm.channels {
        let mut m = f64::NEG_INFINITY;
        for h in 0..fm.height {
            for w in 0..fm.width {
                let v = fm.at(c, h, w);
                if v > m {
                    m = v;
                }
            }
        }
        out.push(m);
    }
    Descriptor::raw(out)
}

/// SPoC: per-channel spatial mean.
pub fn spoc(fm: &FeatureMap) -> Descriptor {
    let inv = 1.0 / fm.spatial() as f64;
    let mut out = Vec::with_capacity(fm.channels);
    for c in 0..fm.channels {
        let mut s = 0.0;
        for h in 0..fm.height {
            for w in 0..fm.width {
                s += fm.at(c, h, w);
            }
        }
        out.push(s * inv);
    }
    Descriptor::raw(out)
}

/// GeM: per-channel generalized p-mean. Negative activations are clamped
/// to 0 so fractional powers stay real. At p = 1 this is bitwise identical
/// to [`spoc`] on nonnegative maps.
pub fn gem(fm: &FeatureMap, p: f64) -> Result<Descriptor> {
    if p <= 0.0 || !p.is_finite() {
        return Err(Error::InvalidArgument("gem exponent p must be > 0".into()));
    }
    let inv = 1.0 / fm.spatial() as f64;
    let mut out = Vec::with_capacity(fm.channels);
    for c in 0..fm.channels {
        if p == 1.0 {
            // bitwise identical to spoc on nonnegative maps
            let mut s = 0.0;
            for h in 0..fm.height {
                for w in 0..fm.width {
                    s += fm.at(c, h, w).max(0.0);
                }
            }
            out.push(s * inv);
            continue;
        }
        // factor out the channel max so v^p cannot overflow for large p
        let mut mx = 0.0f64;
        for h in 0..fm.height {
            for w in 0..fm.width {
                mx = mx.max(fm.at(c, h, w));
            }
        }
        if mx == 0.0 {
            out.push(0.0);
            continue;
        }
        let mut s = 0.0;
        for h in 0..fm.height {
            for w in 0..fm.width {
                let v = fm.at(c, h, w).max(0.0) / mx;
                s += v.powf(p);
            }
        }
        out.push(mx * (s * inv).powf(1.0 / p));
    }
    Ok(Descriptor::raw(out))
}

/// Region start offsets along one axis: a uniform grid from 0 to
/// `axis_len - side` whose step is the largest value not exceeding
/// `(1 - overlap) * side` that still covers the span with equally
/// spaced regions (first at 0, last flush with the far edge).
fn region_offsets(axis_len: usize, side: usize, overlap: f64) -> Vec<usize> {
    let span = axis_len - side;
    if span == 0 {
        return vec![0];
    }
    let ideal = (1.0 - overlap) * side as f64;
    let regions = (span as f64 / ideal).ceil() as usize + 1;
    let mut offsets = Vec::with_capacity(regions);
    for i in 0..regions {
        let o = (i as f64 * span as f64 / (regions - 1) as f64).round() as usize;
        if offsets.last() != Some(&o) {
            offsets.push(o);
        }
    }
    offsets
}

/// R-MAC: per-scale square regions are MAC-pooled, each region vector is
/// L2-normalized, all region vectors are summed and the sum is normalized.
/// Output is unit norm; an all-zero map is an error.
pub fn rmac(fm: &FeatureMap, cfg: &AggregatorConfig) -> Result<Descriptor> {
    cfg.validate()?;
    let mut acc = vec![0.0; fm.channels];
    let min_side = fm.height.min(fm.width);
    for level in 1..=cfg.rmac_levels {
        let side = (2 * min_side / (level + 1)).max(1);
        let side_h = side.min(fm.height);
        let side_w = side.min(fm.width);
        let hs = region_offsets(fm.height, side_h, cfg.rmac_overlap);
        let ws = region_offsets(fm.width, side_w, cfg.rmac_overlap);
        for &h0 in &hs {
            for &w0 in &ws {
                let mut region = Vec::with_capacity(fm.channels);
                for c in 0..fm.channels {
                    let mut m = f64::NEG_INFINITY;
                    for h in h0..h0 + side_h {
                        for w in w0..w0 + side_w {
                            let v = fm.at(c, h, w);
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    region.push(m);
                }
                let norm = region.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for (a, v) in acc.iter_mut().zip(&region) {
                        *a += v / norm;
                    }
                }
            }
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate(
            "r-mac on an all-zero feature map".into(),
        ));
    }
    for a in acc.iter_mut() {
        *a /= norm;
    }
    Ok(Descriptor {
        values: acc,
        normalized: true,
    })
}

const CROW_EPS: f64 = 1e-6;

/// CroW: spatial weighting by per-position activation mass combined with
/// channel weighting by activation sparsity. Negative activations are
/// clamped to 0. An all-zero map yields the zero descriptor.
pub fn crow(fm: &FeatureMap) -> Descriptor {
    let spatial = fm.spatial();
    // spatial aggregation S(h,w) = sum_c fm(c,h,w), clamped inputs
    let mut s = vec![0.0; spatial];
    for c in 0..fm.channels {
        for h in 0..fm.height {
            for w in 0..fm.width {
                s[h * fm.width + w] += fm.at(c, h, w).max(0.0);
            }
        }
    }
    let denom = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s_prime: Vec<f64> = if denom == 0.0 {
        vec![0.0; spatial]
    } else {
        s.iter().map(|v| (v / denom).sqrt()).collect()
    };

    // channel sparsity: fraction of spatial positions with activation > 0
    let mut q = Vec::with_capacity(fm.channels);
    for c in 0..fm.channels {
        let mut nonzero = 0usize;
        for h in 0..fm.height {
            for w in 0..fm.width {
                if fm.at(c, h, w).max(0.0) > 0.0 {
                    nonzero += 1;
                }
            }
        }
        q.push(nonzero as f64 / spatial as f64);
    }
    let q_sum: f64 = q.iter().sum();

    let mut out = Vec::with_capacity(fm.channels);
    for c in 0..fm.channels {
        let wc = ((CROW_EPS + q_sum) / (CROW_EPS + q[c])).ln();
        let mut acc = 0.0;
        for h in 0..fm.height {
            for w in 0..fm.width {
                acc += s_prime[h * fm.width + w] * fm.at(c, h, w).max(0.0);
            }
        }
        out.push(wc * acc);
    }
    Descriptor::raw(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fmap(c: usize, h: usize, w: usize, vals: &[f64]) -> FeatureMap {
        FeatureMap::new(c, h, w, vals.to_vec()).unwrap()
    }

    #[test]
    fn mac_constant_map() {
        let fm = fmap(3, 2, 2, &[7.0; 12]);
        assert_eq!(mac(&fm).values, vec![7.0, 7.0, 7.0]);
    }

    #[test]
    fn mac_single_pixel() {
        let fm = fmap(2, 1, 1, &[0.5, -0.25]);
        assert_eq!(mac(&fm).values, vec![0.5, -0.25]);
    }

    #[test]
    fn mac_enumerated() {
        let fm = fmap(2, 2, 2, &[1.0, 3.0, 2.0, 0.0, -1.0, -2.0, -3.0, -4.0]);
        assert_eq!(mac(&fm).values, vec![3.0, -1.0]);
    }

    #[test]
    fn spoc_constant_and_mean() {
        let fm = fmap(1, 1, 2, &[1.0, 3.0]);
        assert_eq!(spoc(&fm).values, vec![2.0]);
        let k = fmap(2, 3, 3, &[4.5; 18]);
        assert_eq!(spoc(&k).values, vec![4.5, 4.5]);
    }

    #[test]
    fn gem_p1_equals_spoc_bitwise() {
        let vals: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let fm = fmap(2, 3, 4, &vals);
        let g = gem(&fm, 1.0).unwrap();
        let s = spoc(&fm);
        for (a, b) in g.values.iter().zip(&s.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gem_p2_hand_value() {
        let fm = fmap(1, 1, 2, &[1.0, 3.0]);
        let g = gem(&fm, 2.0).unwrap();
        assert!((g.values[0] - 5.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gem_large_p_approaches_mac() {
        let fm = fmap(1, 1, 2, &[1.0, 3.0]);
        let g = gem(&fm, 1000.0).unwrap();
        assert!((g.values[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn gem_rejects_nonpositive_p() {
        let fm = fmap(1, 1, 1, &[1.0]);
        assert!(gem(&fm, 0.0).is_err());
        assert!(gem(&fm, -2.0).is_err());
    }

    #[test]
    fn rmac_single_region_is_normalized_mac() {
        // H = W = s_1, L = 1: one region covers the whole map
        let vals: Vec<f64> = (0..2 * 4 * 4).map(|i| (i % 7) as f64 + 0.5).collect();
        let fm = fmap(2, 4, 4, &vals);
        let cfg = AggregatorConfig {
            kind: AggregatorKind::Rmac,
            rmac_levels: 1,
            ..Default::default()
        };
        let r = rmac(&fm, &cfg).unwrap();
        let m = mac(&fm);
        let norm = m.norm();
        for (a, b) in r.values.iter().zip(&m.values) {
            assert!((a - b / norm).abs() < 1e-10);
        }
        assert!(r.normalized);
    }

    #[test]
    fn rmac_constant_map_is_uniform() {
        let fm = fmap(4, 3, 3, &[2.0; 36]);
        let cfg = AggregatorConfig::default();
        let r = rmac(&fm, &cfg).unwrap();
        for v in &r.values {
            assert!((v - 0.5).abs() < 1e-12); // 1/sqrt(4)
        }
    }

    #[test]
    fn rmac_enumerated_1x4() {
        // level-1 side is floor(2*min(1,4)/2)=1; nonzero cells {1,2,4} each
        // normalize to scalar 1, the zero cell drops out, sum 3 renormalizes
        // to 1.0
        let fm = fmap(1, 1, 4, &[0.0, 1.0, 2.0, 4.0]);
        let cfg = AggregatorConfig {
            kind: AggregatorKind::Rmac,
            rmac_levels: 1,
            ..Default::default()
        };
        let r = rmac(&fm, &cfg).unwrap();
        assert_eq!(r.values.len(), 1);
        assert!((r.values[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmac_all_zero_errors() {
        let fm = fmap(2, 2, 2, &[0.0; 8]);
        assert!(rmac(&fm, &AggregatorConfig::default()).is_err());
    }

    #[test]
    fn region_offsets_match_grid_rule() {
        // span 2, side 2, overlap 0.4: ideal step 1.2 -> 3 regions at 0,1,2
        assert_eq!(region_offsets(4, 2, 0.4), vec![0, 1, 2]);
        assert_eq!(region_offsets(4, 4, 0.4), vec![0]);
        assert_eq!(region_offsets(1, 1, 0.4), vec![0]);
    }

    #[test]
    fn crow_all_zero_map_is_zero() {
        let fm = fmap(3, 2, 2, &[0.0; 12]);
        assert!(crow(&fm).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crow_single_channel_constant_vanishes() {
        let fm = fmap(1, 2, 2, &[1.0; 4]);
        let d = crow(&fm);
        assert!(d.values[0].abs() < 1e-9);
    }

    #[test]
    fn crow_zero_channel_gets_zero_output() {
        let fm = fmap(2, 1, 2, &[1.0, 2.0, 0.0, 0.0]);
        let d = crow(&fm);
        // zero channel contributes no activation mass
        assert_eq!(d.values[1], 0.0);
        assert!(d.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fmap_roundtrip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fmap");
        let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        let fm = fmap(3, 2, 2, &vals);
        fm.write(&path).unwrap();
        let back = FeatureMap::read(&path).unwrap();
        assert_eq!(back, fm);
    }

    proptest! {
        #[test]
        fn outputs_have_dim_c_and_are_finite(
            c in 1usize..4, h in 1usize..5, w in 1usize..5,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..c*h*w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fm = FeatureMap::new(c, h, w, vals).unwrap();
            for d in [mac(&fm), spoc(&fm), gem(&fm, 3.0).unwrap(), crow(&fm)] {
                prop_assert_eq!(d.values.len(), c);
                prop_assert!(d.values.iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn spatial_permutation_invariance(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (c, h, w) = (3, 3, 4);
            let vals: Vec<f64> = (0..c*h*w).map(|_| rng.gen_range(0.0..2.0)).collect();
            let fm = FeatureMap::new(c, h, w, vals.clone()).unwrap();
            let mut perm: Vec<usize> = (0..h*w).collect();
            perm.shuffle(&mut rng);
            let mut pvals = vec![0.0; c*h*w];
            for ci in 0..c {
                for (pi, &src) in perm.iter().enumerate() {
                    pvals[ci*h*w + pi] = vals[ci*h*w + src];
                }
            }
            let pfm = FeatureMap::new(c, h, w, pvals).unwrap();
            prop_assert_eq!(mac(&fm).values, mac(&pfm).values);
            let (s, ps) = (spoc(&fm), spoc(&pfm));
            for (a, b) in s.values.iter().zip(&ps.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let (g, pg) = (gem(&fm, 3.0).unwrap(), gem(&pfm, 3.0).unwrap());
            for (a, b) in g.values.iter().zip(&pg.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn positive_scaling_behaviour(seed in 0u64..200, lambda in 0.1f64..5.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (c, h, w) = (2, 4, 4);
            let vals: Vec<f64> = (0..c*h*w).map(|_| rng.gen_range(0.01..2.0)).collect();
            let scaled: Vec<f64> = vals.iter().map(|v| v * lambda).collect();
            let fm = FeatureMap::new(c, h, w, vals).unwrap();
            let sfm = FeatureMap::new(c, h, w, scaled).unwrap();
            for (a, b) in mac(&fm).values.iter().zip(&mac(&sfm).values) {
                prop_assert!((a * lambda - b).abs() < 1e-9);
            }
            for (a, b) in gem(&fm, 3.0).unwrap().values.iter()
                .zip(&gem(&sfm, 3.0).unwrap().values) {
                prop_assert!((a * lambda - b).abs() < 1e-9);
            }
            let cfg = AggregatorConfig::default();
            for (a, b) in rmac(&fm, &cfg).unwrap().values.iter()
                .zip(&rmac(&sfm, &cfg).unwrap().values) {
                prop_assert!((a - b).abs() < 1e-9); // scale-invariant
            }
        }

        #[test]
        fn gem_converges_to_mac_as_p_doubles(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (c, h, w) = (2, 3, 3);
            let vals: Vec<f64> = (0..c*h*w).map(|_| rng.gen_range(0.1..3.0)).collect();
            let fm = FeatureMap::new(c, h, w, vals).unwrap();
            let m = mac(&fm);
            let mut prev = f64::INFINITY;
            let mut p = 8.0;
            while p <= 1024.0 {
                let g = gem(&fm, p).unwrap();
                let dist = g.values.iter().zip(&m.values)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                prop_assert!(dist <= prev + 1e-12);
                prev = dist;
                p *= 2.0;
            }
        }
    }
}
