//! Multi-scale square sliding windows on the feature-map grid, and the soft
//! region proposal crop of a semantic map.

use std::fmt;
use std::io::Write;

use crate::detector::SemanticMap;
use crate::error::{AsdaError, Result};
use crate::feature::FeatureMap;

pub const MAX_SCALES: usize = 5;
pub const OVERLAP_FRACTION: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CandidateRegion {
    /// 0 for the full-frame region, otherwise the sliding-window scale.
    pub scale: usize,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl CandidateRegion {
    pub fn square(scale: usize, x0: usize, y0: usize, side: usize) -> Self {
        CandidateRegion {
            scale,
            x0,
            y0,
            width: side,
            height: side,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        CandidateRegion {
            scale: 0,
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }

    pub fn side(&self) -> Option<usize> {
        (self.width == self.height).then_some(self.width)
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.x0 + self.width <= width
            && self.y0 + self.height <= height
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.fits(height, width) {
            Ok(())
        } else {
            Err(AsdaError::RegionOutOfBounds {
                region: self.to_string(),
                height,
                width,
            })
        }
    }
}

impl fmt::Display for CandidateRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side() {
            Some(s) => write!(f, "{},{},{},{}", self.scale, self.x0, self.y0, s),
            None => write!(
                f,
                "{},{},{},{}x{}",
                self.scale, self.x0, self.y0, self.width, self.height
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapViolation {
    pub scale: usize,
    pub along_x: bool,
    pub first: usize,
    pub second: usize,
    pub overlap: i64,
    pub limit: f64,
}

impl fmt::Display for OverlapViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "scale {} windows at {} {} and {} overlap by {} cells (limit {:.1})",
            self.scale,
            if self.along_x { "x" } else { "y" },
            self.first,
            self.second,
            self.overlap,
            self.limit
        )
    }
}

fn window_side(height: usize, width: usize, scale: usize) -> usize {
    (2 * height.min(width) / (scale + 1)).max(1)
}

/// `count` positions from 0 to `span`, evenly spaced and rounded; deduplicated.
fn spaced_positions(span: usize, count: usize) -> Vec<usize> {
    let mut out: Vec<usize> = if count <= 1 {
        vec![0]
    } else {
        (0..count)
            .map(|j| ((j * span) as f64 / (count - 1) as f64).round() as usize)
            .collect()
    };
    out.dedup();
    out
}

fn max_overlap(positions: &[usize], side: usize) -> i64 {
    positions
        .windows(2)
        .map(|p| side as i64 - (p[1] - p[0]) as i64)
        .max()
        .unwrap_or(i64::MIN)
}

fn overlap_limit(side: usize) -> f64 {
    OVERLAP_FRACTION * side as f64 + 1.0
}

/// Square sliding windows of `scales` scales; `scales == 0` yields the single
/// full-frame region. Output is scale-major, then row-major.
pub fn generate_candidate_regions(height: usize, width: usize, scales: usize) -> Result<Vec<CandidateRegion>> {
    if scales > MAX_SCALES {
        return Err(AsdaError::InvalidConfig(format!(
            "region scale count {scales} exceeds {MAX_SCALES}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(AsdaError::InvalidConfig(format!(
            "cannot place regions on a {height}x{width} grid"
        )));
    }
    if scales == 0 {
        return Ok(vec![CandidateRegion::full(height, width)]);
    }
    let short = height.min(width);
    let long = height.max(width);
    let x_is_long = width >= height;
    let mut regions: Vec<CandidateRegion> = Vec::new();
    for l in 1..=scales {
        let side = window_side(height, width, l);
        let long_pos = spaced_positions(long - side, l + 1);
        let mut short_count = if long > side {
            let ratio = (short - side) as f64 / (long - side) as f64;
            ((ratio * l as f64).round() as usize + 1).max(1)
        } else {
            1
        };
        let mut short_pos = spaced_positions(short - side, short_count);
        // Square maps keep both axes symmetric; elsewhere the short axis drops
        // windows until neighbours respect the overlap limit.
        while short < long && short_count > 1 && max_overlap(&short_pos, side) as f64 > overlap_limit(side) {
            short_count -= 1;
            short_pos = spaced_positions(short - side, short_count);
        }
        let (xs, ys) = if x_is_long {
            (&long_pos, &short_pos)
        } else {
            (&short_pos, &long_pos)
        };
        for &y0 in ys {
            for &x0 in xs {
                let r = CandidateRegion::square(l, x0, y0, side);
                if !regions
                    .iter()
                    .any(|q| (q.x0, q.y0, q.width, q.height) == (r.x0, r.y0, r.width, r.height))
                {
                    regions.push(r);
                }
            }
        }
    }
    Ok(regions)
}

/// Neighbouring same-scale windows whose overlap exceeds `0.4·side + 1` cells.
pub fn check_overlap(regions: &[CandidateRegion]) -> Vec<OverlapViolation> {
    let mut out = Vec::new();
    let mut scales: Vec<usize> = regions.iter().map(|r| r.scale).filter(|s| *s > 0).collect();
    scales.sort_unstable();
    scales.dedup();
    for scale in scales {
        let same: Vec<&CandidateRegion> = regions.iter().filter(|r| r.scale == scale).collect();
        let side = same[0].width;
        for along_x in [true, false] {
            let mut pos: Vec<usize> = same
                .iter()
                .map(|r| if along_x { r.x0 } else { r.y0 })
                .collect();
            pos.sort_unstable();
            pos.dedup();
            for p in pos.windows(2) {
                let overlap = side as i64 - (p[1] - p[0]) as i64;
                if overlap as f64 > overlap_limit(side) {
                    out.push(OverlapViolation {
                        scale,
                        along_x,
                        first: p[0],
                        second: p[1],
                        overlap,
                        limit: overlap_limit(side),
                    });
                }
            }
        }
    }
    out
}

/// Writes the debugging export, one `scale,x0,y0,side` row per region.
pub fn write_regions_csv<W: Write>(regions: &[CandidateRegion], mut out: W) -> Result<()> {
    writeln!(out, "scale,x0,y0,side")?;
    for r in regions {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

/// A semantic map restricted to one candidate region.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftRegionProposal {
    pub region: CandidateRegion,
    pub step: usize,
    values: Vec<f64>,
}

impl SoftRegionProposal {
    pub fn new(region: CandidateRegion, step: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != region.area() {
            return Err(AsdaError::ShapeMismatch(format!(
                "proposal for {} needs {} values, got {}",
                region,
                region.area(),
                values.len()
            )));
        }
        Ok(SoftRegionProposal {
            region,
            step,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.region.height
    }

    pub fn width(&self) -> usize {
        self.region.width
    }

    /// All-ones proposal of the same shape (hard rectangular region).
    pub fn hardened(&self) -> Self {
        SoftRegionProposal {
            region: self.region,
            step: self.step,
            values: vec![1.0; self.values.len()],
        }
    }
}

pub fn crop_soft_region_proposal(m: &SemanticMap, r: &CandidateRegion) -> Result<SoftRegionProposal> {
    r.check_bounds(m.height(), m.width())?;
    let mut values = Vec::with_capacity(r.area());
    for y in r.y0..r.y0 + r.height {
        let row = y * m.width();
        values.extend_from_slice(&m.values()[row + r.x0..row + r.x0 + r.width]);
    }
    Ok(SoftRegionProposal {
        region: *r,
        step: m.step(),
        values,
    })
}

pub fn crop_feature_map(f: &FeatureMap, r: &CandidateRegion) -> Result<FeatureMap> {
    r.check_bounds(f.height(), f.width())?;
    let c = f.channels();
    let mut data = Vec::with_capacity(r.area() * c);
    for y in r.y0..r.y0 + r.height {
        let start = (y * f.width() + r.x0) * c;
        data.extend_from_slice(&f.data()[start..start + r.width * c]);
    }
    Ok(FeatureMap::from_raw(r.height, r.width, c, data))
}
