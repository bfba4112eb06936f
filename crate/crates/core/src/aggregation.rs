//! Soft-region weighted pooling, per-map aggregation, concatenation and
//! dimensionality reduction into a unit-norm descriptor.
//!
//! Two forward paths exist. [`describe`] crops the semantic map and the
//! feature map separately for every region and weights each crop pair.
//! [`describe_efficient`] weights the whole feature map once per semantic map
//! and pools windows of the weighted map. Both produce the same descriptor
//! because cropping commutes with element-wise weighting; only the efficient
//! path carries a backward pass.

use std::fmt;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::detector::{compute_semantic_maps, DetectorOutput, DetectorStack};
use crate::error::{AsdaError, Result};
use crate::feature::FeatureMap;
use crate::region::{crop_feature_map, crop_soft_region_proposal, CandidateRegion, SoftRegionProposal};

const DESCRIPTOR_MAGIC: &[u8; 8] = b"ASDADSC1";
pub const DEFAULT_GEM_P: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pooling {
    Mac,
    Avg,
    Gem(f64),
}

impl Pooling {
    pub fn gem(p: f64) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(AsdaError::InvalidConfig(format!("GeM exponent {p} must be >= 1")));
        }
        Ok(Pooling::Gem(p))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Pooling::Gem(p) => Pooling::gem(p).map(|_| ()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pooling::Mac => write!(f, "MAC"),
            Pooling::Avg => write!(f, "AVG"),
            Pooling::Gem(p) if *p == DEFAULT_GEM_P => write!(f, "GEM"),
            Pooling::Gem(p) => write!(f, "GEM({p})"),
        }
    }
}

impl FromStr for Pooling {
    type Err = AsdaError;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        match upper.as_str() {
            "MAC" => Ok(Pooling::Mac),
            "AVG" => Ok(Pooling::Avg),
            "GEM" => Ok(Pooling::Gem(DEFAULT_GEM_P)),
            _ => {
                let p = upper
                    .strip_prefix("GEM(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|p| p.trim().parse::<f64>().ok())
                    .ok_or_else(|| AsdaError::Invalid(format!("unknown pooling `{s}`")))?;
                Pooling::gem(p)
            }
        }
    }
}

/// How candidate regions are weighted before pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalMode {
    /// Crops of the semantic maps (soft region proposals).
    Soft,
    /// Uniform all-ones weights over each rectangle.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregationSettings {
    pub pooling: Pooling,
    pub proposal: ProposalMode,
}

impl Default for AggregationSettings {
    fn default() -> Self {
        AggregationSettings {
            pooling: Pooling::Mac,
            proposal: ProposalMode::Soft,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionalRepresentation {
    pub values: Vec<f64>,
    pub region: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReductionParams {
    input_dim: usize,
    /// D×(K·C), row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    values: Vec<f64>,
}

pub(crate) fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|x| x / norm).collect(), norm)
    }
}

/// Gradient of `v / ‖v‖` given the normalized vector, the norm and the
/// upstream gradient. Zero when the norm is zero.
fn l2_normalize_backward(unit: &[f64], norm: f64, grad: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; grad.len()];
    }
    let dot: f64 = unit.iter().zip(grad).map(|(u, g)| u * g).sum();
    unit.iter()
        .zip(grad)
        .map(|(u, g)| (g - u * dot) / norm)
        .collect()
}

impl Descriptor {
    /// Normalizes `values`; an all-zero vector stays zero.
    pub fn from_unnormalized(values: &[f64]) -> Self {
        Descriptor {
            values: l2_normalize(values).0,
        }
    }

    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm != 0.0 && (norm - 1.0).abs() > 1e-9 {
            return Err(AsdaError::Invalid(format!("descriptor norm {norm} is not 1")));
        }
        Ok(Descriptor { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(DESCRIPTOR_MAGIC)?;
        out.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != DESCRIPTOR_MAGIC {
            return Err(AsdaError::Format("not a descriptor file (bad magic)".into()));
        }
        let mut buf4 = [0u8; 4];
        input.read_exact(&mut buf4)?;
        let d = u32::from_le_bytes(buf4) as usize;
        let mut values = Vec::with_capacity(d);
        let mut buf8 = [0u8; 8];
        for _ in 0..d {
            input.read_exact(&mut buf8)?;
            values.push(f64::from_le_bytes(buf8));
        }
        Descriptor::from_unit(values)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "index,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{i},{v:?}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e == "csv") {
            self.write_csv(file)
        } else {
            self.write_to(file)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl ReductionParams {
    /// Random orthonormal rows (seeded) and a zero bias.
    pub fn init(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim < 1 || output_dim > input_dim {
            return Err(AsdaError::InvalidConfig(format!(
                "output dimension {output_dim} must lie in 1..={input_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = DMatrix::<f64>::from_fn(input_dim, output_dim, |_, _| StandardNormal.sample(&mut rng));
        let q = gauss.qr().q();
        let mut weight = Vec::with_capacity(output_dim * input_dim);
        for row in 0..output_dim {
            weight.extend(q.column(row).iter().copied());
        }
        Ok(ReductionParams {
            input_dim,
            weight,
            bias: vec![0.0; output_dim],
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        ReductionParams {
            input_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn from_parts(input_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if bias.is_empty() || bias.len() > input_dim || weight.len() != bias.len() * input_dim {
            return Err(AsdaError::ShapeMismatch(format!(
                "reduction {}x{input_dim} with {} weights",
                bias.len(),
                weight.len()
            )));
        }
        Ok(ReductionParams {
            input_dim,
            weight,
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    fn apply(&self, g: &[f64]) -> Vec<f64> {
        self.weight
            .chunks(self.input_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(g).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }
}

fn check_pool_shapes(srp: &SoftRegionProposal, crop: &FeatureMap) -> Result<()> {
    if srp.height() != crop.height() || srp.width() != crop.width() {
        return Err(AsdaError::ShapeMismatch(format!(
            "proposal {}x{} vs feature crop {}x{}",
            srp.height(),
            srp.width(),
            crop.height(),
            crop.width()
        )));
    }
    Ok(())
}

/// Per-channel pooling of `weighted` over `region`, in row-major cell order.
/// Returns the pooled vector and, for MAC, the winning cell per channel.
fn pool_window(
    weighted: &FeatureMap,
    region: &CandidateRegion,
    pooling: Pooling,
) -> (Vec<f64>, Vec<usize>) {
    let c = weighted.channels();
    let w = weighted.width();
    let data = weighted.data();
    let cells = (region.y0..region.y0 + region.height)
        .flat_map(move |y| (region.x0..region.x0 + region.width).map(move |x| y * w + x));
    let n = region.area() as f64;
    match pooling {
        Pooling::Mac => {
            let mut best = vec![f64::NEG_INFINITY; c];
            let mut arg = vec![0usize; c];
            for cell in cells {
                for ch in 0..c {
                    let v = data[cell * c + ch];
                    if v > best[ch] {
                        best[ch] = v;
                        arg[ch] = cell;
                    }
                }
            }
            (best, arg)
        }
        Pooling::Avg => {
            let mut sum = vec![0.0; c];
            for cell in cells {
                for ch in 0..c {
                    sum[ch] += data[cell * c + ch];
                }
            }
            (sum.into_iter().map(|s| s / n).collect(), Vec::new())
        }
        Pooling::Gem(p) => {
            let mut sum = vec![0.0; c];
            for cell in cells {
                for ch in 0..c {
                    sum[ch] += data[cell * c + ch].powf(p);
                }
            }
            (
                sum.into_iter().map(|s| (s / n).powf(1.0 / p)).collect(),
                Vec::new(),
            )
        }
    }
}

fn weight_crop(srp: &SoftRegionProposal, crop: &FeatureMap) -> FeatureMap {
    let c = crop.channels();
    let mut data = crop.data().to_vec();
    for (cell, a) in srp.values().iter().enumerate() {
        for v in &mut data[cell * c..(cell + 1) * c] {
            *v *= a;
        }
    }
    FeatureMap::from_raw(crop.height(), crop.width(), c, data)
}

/// Pools `srp ⊙ crop` per channel.
pub fn pool_region(srp: &SoftRegionProposal, crop: &FeatureMap, pooling: Pooling) -> Result<RegionalRepresentation> {
    check_pool_shapes(srp, crop)?;
    pooling.validate()?;
    let weighted = weight_crop(srp, crop);
    let whole = CandidateRegion::full(crop.height(), crop.width());
    let (values, _) = pool_window(&weighted, &whole, pooling);
    Ok(RegionalRepresentation {
        values,
        region: 0,
        step: srp.step,
    })
}

/// Sums regional representations of one semantic map and l2-normalizes;
/// an all-zero sum is returned unnormalized.
pub fn aggregate_map(reps: &[RegionalRepresentation]) -> Result<Vec<f64>> {
    let first = reps
        .first()
        .ok_or_else(|| AsdaError::Invalid("no regional representations to aggregate".into()))?;
    let c = first.values.len();
    let mut sum = vec![0.0; c];
    for r in reps {
        if r.values.len() != c || r.step != first.step {
            return Err(AsdaError::ShapeMismatch(format!(
                "regional representation (step {}, {} channels) does not match (step {}, {c})",
                r.step,
                r.values.len(),
                first.step
            )));
        }
        for (s, v) in sum.iter_mut().zip(&r.values) {
            *s += v;
        }
    }
    Ok(l2_normalize(&sum).0)
}

/// Concatenates per-map vectors and applies the reduction followed by l2
/// normalization.
pub fn concat_and_reduce(per_map: &[Vec<f64>], params: &ReductionParams) -> Result<Descriptor> {
    let g: Vec<f64> = per_map.iter().flatten().copied().collect();
    let c = per_map.first().map_or(0, Vec::len);
    if per_map.iter().any(|v| v.len() != c) || g.len() != params.input_dim {
        return Err(AsdaError::ShapeMismatch(format!(
            "concatenated length {} does not match reduction input {}",
            g.len(),
            params.input_dim
        )));
    }
    Ok(Descriptor::from_unnormalized(&params.apply(&g)))
}

fn check_pipeline(
    f: &FeatureMap,
    stack: &DetectorStack,
    regions: &[CandidateRegion],
    settings: &AggregationSettings,
    params: &ReductionParams,
) -> Result<()> {
    settings.pooling.validate()?;
    if regions.is_empty() {
        return Err(AsdaError::Invalid("no candidate regions".into()));
    }
    for r in regions {
        r.check_bounds(f.height(), f.width())?;
    }
    if stack.steps() * f.channels() != params.input_dim() {
        return Err(AsdaError::ShapeMismatch(format!(
            "K·C = {} does not match reduction input {}",
            stack.steps() * f.channels(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Reference composition: crops the semantic map and the feature map
/// separately for every (region, step) pair.
pub fn describe(
    f: &FeatureMap,
    stack: &DetectorStack,
    regions: &[CandidateRegion],
    settings: &AggregationSettings,
    params: &ReductionParams,
) -> Result<Descriptor> {
    check_pipeline(f, stack, regions, settings, params)?;
    let detected = compute_semantic_maps(f, stack)?;
    let crops = regions
        .iter()
        .map(|r| crop_feature_map(f, r))
        .collect::<Result<Vec<_>>>()?;
    let mut per_map = Vec::with_capacity(stack.steps());
    for m in &detected.maps {
        let mut reps = Vec::with_capacity(regions.len());
        for (i, (r, crop)) in regions.iter().zip(&crops).enumerate() {
            let mut srp = crop_soft_region_proposal(m, r)?;
            if settings.proposal == ProposalMode::Hard {
                srp = srp.hardened();
            }
            let mut rep = pool_region(&srp, crop, settings.pooling)?;
            rep.region = i;
            reps.push(rep);
        }
        per_map.push(aggregate_map(&reps)?);
    }
    concat_and_reduce(&per_map, params)
}

/// Intermediate values of the efficient forward pass needed for gradients.
#[derive(Clone, Debug)]
pub struct AggregationCache {
    detected: DetectorOutput,
    weighted: Vec<FeatureMap>,
    /// pooled[k][i] and, for MAC, argmax[k][i].
    pooled: Vec<Vec<Vec<f64>>>,
    argmax: Vec<Vec<Vec<usize>>>,
    per_map_unit: Vec<Vec<f64>>,
    per_map_norm: Vec<f64>,
    reduced_norm: f64,
    descriptor: Descriptor,
}

impl AggregationCache {
    pub fn detector_output(&self) -> &DetectorOutput {
        &self.detected
    }

    pub(crate) fn hash_structure<H: Hasher>(&self, state: &mut H) {
        self.detected.hash_structure(state);
        for per_step in &self.argmax {
            for idx in per_step.iter().flatten() {
                state.write_usize(*idx);
            }
        }
        for per_step in &self.pooled {
            for v in per_step.iter().flatten() {
                state.write_u8((*v == 0.0) as u8);
            }
        }
        for n in &self.per_map_norm {
            state.write_u8((*n == 0.0) as u8);
        }
        state.write_u8((self.reduced_norm == 0.0) as u8);
    }
}

/// Weights the feature map once per semantic map, then pools every window.
pub fn describe_efficient(
    f: &FeatureMap,
    stack: &DetectorStack,
    regions: &[CandidateRegion],
    settings: &AggregationSettings,
    params: &ReductionParams,
) -> Result<Descriptor> {
    Ok(forward_efficient(f, stack, regions, settings, params)?.descriptor)
}

pub fn forward_efficient(
    f: &FeatureMap,
    stack: &DetectorStack,
    regions: &[CandidateRegion],
    settings: &AggregationSettings,
    params: &ReductionParams,
) -> Result<AggregationCache> {
    check_pipeline(f, stack, regions, settings, params)?;
    let detected = compute_semantic_maps(f, stack)?;
    let c = f.channels();
    let mut weighted = Vec::with_capacity(stack.steps());
    let mut pooled = Vec::with_capacity(stack.steps());
    let mut argmax = Vec::with_capacity(stack.steps());
    let mut per_map_unit = Vec::with_capacity(stack.steps());
    let mut per_map_norm = Vec::with_capacity(stack.steps());
    for m in &detected.maps {
        let wmap = match settings.proposal {
            ProposalMode::Soft => {
                let mut data = f.data().to_vec();
                for (cell, a) in m.values().iter().enumerate() {
                    for v in &mut data[cell * c..(cell + 1) * c] {
                        *v *= a;
                    }
                }
                FeatureMap::from_raw(f.height(), f.width(), c, data)
            }
            ProposalMode::Hard => f.clone(),
        };
        let mut sum = vec![0.0; c];
        let mut step_pooled = Vec::with_capacity(regions.len());
        let mut step_arg = Vec::with_capacity(regions.len());
        for r in regions {
            let (v, arg) = pool_window(&wmap, r, settings.pooling);
            for (s, x) in sum.iter_mut().zip(&v) {
                *s += x;
            }
            step_pooled.push(v);
            step_arg.push(arg);
        }
        let (unit, norm) = l2_normalize(&sum);
        weighted.push(wmap);
        pooled.push(step_pooled);
        argmax.push(step_arg);
        per_map_unit.push(unit);
        per_map_norm.push(norm);
    }
    if per_map_unit.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AsdaError::NonFinite { stage: "aggregation" });
    }
    let g: Vec<f64> = per_map_unit.iter().flatten().copied().collect();
    let reduced = params.apply(&g);
    if reduced.iter().any(|v| !v.is_finite()) {
        return Err(AsdaError::NonFinite { stage: "reduction" });
    }
    let (unit, reduced_norm) = l2_normalize(&reduced);
    Ok(AggregationCache {
        detected,
        weighted,
        pooled,
        argmax,
        per_map_unit,
        per_map_norm,
        reduced_norm,
        descriptor: Descriptor { values: unit },
    })
}

impl AggregationCache {
    pub fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }
}

/// Gradient buffers for one backward pass through aggregation and detection.
pub struct AggregationGrads<'a> {
    pub reduction_weight: &'a mut [f64],
    pub reduction_bias: &'a mut [f64],
    pub detector_weights: &'a mut [f64],
    pub detector_biases: &'a mut [f64],
    /// Gradient w.r.t. the input feature map, when wanted.
    pub features: Option<&'a mut [f64]>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward_efficient(
    cache: &AggregationCache,
    f: &FeatureMap,
    stack: &DetectorStack,
    regions: &[CandidateRegion],
    settings: &AggregationSettings,
    params: &ReductionParams,
    d_descriptor: &[f64],
    grads: AggregationGrads<'_>,
) {
    let AggregationGrads {
        reduction_weight,
        reduction_bias,
        detector_weights,
        detector_biases,
        mut features,
    } = grads;
    let c = f.channels();
    let cells = f.height() * f.width();
    let d_reduced = l2_normalize_backward(cache.descriptor.values(), cache.reduced_norm, d_descriptor);
    let g: Vec<f64> = cache.per_map_unit.iter().flatten().copied().collect();
    let input_dim = params.input_dim();
    let mut d_g = vec![0.0; input_dim];
    for (row, &dy) in d_reduced.iter().enumerate() {
        if dy == 0.0 {
            continue;
        }
        reduction_bias[row] += dy;
        let w_row = &params.weight[row * input_dim..(row + 1) * input_dim];
        let dw_row = &mut reduction_weight[row * input_dim..(row + 1) * input_dim];
        for j in 0..input_dim {
            dw_row[j] += dy * g[j];
            d_g[j] += dy * w_row[j];
        }
    }

    let mut d_maps = Vec::with_capacity(stack.steps());
    for (k, m) in cache.detected.maps.iter().enumerate() {
        let d_sum = l2_normalize_backward(&cache.per_map_unit[k], cache.per_map_norm[k], &d_g[k * c..(k + 1) * c]);
        let wmap = &cache.weighted[k];
        let mut d_weighted = vec![0.0; cells * c];
        for (i, r) in regions.iter().enumerate() {
            match settings.pooling {
                Pooling::Mac => {
                    for (ch, &cell) in cache.argmax[k][i].iter().enumerate() {
                        d_weighted[cell * c + ch] += d_sum[ch];
                    }
                }
                Pooling::Avg => {
                    let n = r.area() as f64;
                    for y in r.y0..r.y0 + r.height {
                        for x in r.x0..r.x0 + r.width {
                            let cell = y * f.width() + x;
                            for ch in 0..c {
                                d_weighted[cell * c + ch] += d_sum[ch] / n;
                            }
                        }
                    }
                }
                Pooling::Gem(p) => {
                    let n = r.area() as f64;
                    let pooled = &cache.pooled[k][i];
                    for y in r.y0..r.y0 + r.height {
                        for x in r.x0..r.x0 + r.width {
                            let cell = y * f.width() + x;
                            for ch in 0..c {
                                let mval = pooled[ch];
                                if mval == 0.0 {
                                    continue;
                                }
                                let v = wmap.data()[cell * c + ch];
                                d_weighted[cell * c + ch] +=
                                    d_sum[ch] * mval.powf(1.0 - p) * v.powf(p - 1.0) / n;
                            }
                        }
                    }
                }
            }
        }
        let mut d_m = vec![0.0; cells];
        match settings.proposal {
            ProposalMode::Soft => {
                for cell in 0..cells {
                    let fv = &f.data()[cell * c..(cell + 1) * c];
                    let dw = &d_weighted[cell * c..(cell + 1) * c];
                    d_m[cell] = fv.iter().zip(dw).map(|(a, b)| a * b).sum();
                    if let Some(df) = features.as_deref_mut() {
                        let a = m.values()[cell];
                        for ch in 0..c {
                            df[cell * c + ch] += dw[ch] * a;
                        }
                    }
                }
            }
            ProposalMode::Hard => {
                if let Some(df) = features.as_deref_mut() {
                    for (d, w) in df.iter_mut().zip(&d_weighted) {
                        *d += w;
                    }
                }
            }
        }
        d_maps.push(d_m);
    }
    cache
        .detected
        .backward(f, stack, &d_maps, detector_weights, detector_biases, features);
}
