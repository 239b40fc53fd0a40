//! Multi-domain synthetic benchmarks and tabular ingestion.
//!
//! Samples are `H x W x 3` images. Channel 0 carries a class-specific
//! oriented grating (the stable factor). Channels 1 and 2 carry a spatially
//! constant label cue whose agreement with the label is set per domain by
//! `rho`, plus a per-domain offset (the spurious, domain-dependent factor).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const INPUT_CHANNELS: usize = 3;
pub const STABLE_CHANNEL: usize = 0;
pub const SPURIOUS_CHANNELS: [usize; 2] = [1, 2];
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    /// Label/spurious-cue correlation in `[-1, 1]`.
    pub rho: f64,
    /// Added to both spurious channels.
    pub offset: [f64; 2],
    pub stable_amplitude: f64,
    pub spurious_amplitude: f64,
    /// Per-pixel noise on every channel; `> 0`.
    pub noise_std: f64,
    pub samples: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!(
                "domain {}: rho {} outside [-1, 1]",
                self.id, self.rho
            )));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "domain {}: noise std must be positive, got {}",
                self.id, self.noise_std
            )));
        }
        Ok(())
    }
}

/// Samples of one domain. `spec` is absent for loaded data.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub id: usize,
    pub spec: Option<DomainSpec>,
    /// `[N, H, W, C]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Domain {
        Domain {
            id: self.id,
            spec: self.spec.clone(),
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded shuffle, then the first `floor(0.8 N)` samples train and the
    /// rest validate.
    pub fn split(&self, seed: u64) -> (Domain, Domain) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.id as u64);
        idx.shuffle(&mut rng);
        let cut = (self.len() as f64 * TRAIN_FRACTION).floor() as usize;
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub sources: Vec<Domain>,
    pub target: Domain,
}

impl Benchmark {
    pub fn input_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn domains(&self) -> impl Iterator<Item = &Domain> {
        self.sources.iter().chain(std::iter::once(&self.target))
    }
}

/// Zero-mean grating for class `c`: orientation `pi c / C`, period 4 pixels.
pub fn class_pattern(c: usize, classes: usize, height: usize, width: usize) -> Vec<f64> {
    let theta = PI * c as f64 / classes as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            out.push((2.0 * PI * (i as f64 * ct + j as f64 * st) / 4.0 + PI / 4.0).sin());
        }
    }
    out
}

/// Direction of the spurious cue for class `c` in the two spurious channels.
pub fn spurious_direction(c: usize, classes: usize) -> [f64; 2] {
    let a = 2.0 * PI * c as f64 / classes as f64;
    [a.cos(), a.sin()]
}

pub fn generate_domain(
    spec: &DomainSpec,
    classes: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Domain> {
    spec.validate()?;
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(spec.id as u64);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let patterns: Vec<Vec<f64>> = (0..classes)
        .map(|c| class_pattern(c, classes, height, width))
        .collect();
    let pixels = height * width;
    let mut data = Vec::with_capacity(spec.samples * pixels * INPUT_CHANNELS);
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let y = rng.random_range(0..classes);
        let aligned = rng.random::<f64>() < (1.0 + spec.rho) / 2.0;
        let sign = if aligned { 1.0 } else { -1.0 };
        let dir = spurious_direction(y, classes);
        let cue = [
            sign * spec.spurious_amplitude * dir[0] + spec.offset[0],
            sign * spec.spurious_amplitude * dir[1] + spec.offset[1],
        ];
        for &p in &patterns[y] {
            data.push(spec.stable_amplitude * p + noise.sample(&mut rng));
            data.push(cue[0] + noise.sample(&mut rng));
            data.push(cue[1] + noise.sample(&mut rng));
        }
        labels.push(y);
    }
    Ok(Domain {
        id: spec.id,
        spec: Some(spec.clone()),
        inputs: Tensor::new(vec![spec.samples, height, width, INPUT_CHANNELS], data)?,
        labels,
    })
}

/// Noise-free probes: row `c * C + k` carries the grating of class `c` and
/// the aligned cue of class `k`, with zero offset.
pub fn counterfactual_inputs(
    classes: usize,
    height: usize,
    width: usize,
    stable_amplitude: f64,
    spurious_amplitude: f64,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(classes * classes * height * width * INPUT_CHANNELS);
    for c in 0..classes {
        let pattern = class_pattern(c, classes, height, width);
        for k in 0..classes {
            let dir = spurious_direction(k, classes);
            for &p in &pattern {
                data.extend([
                    stable_amplitude * p,
                    spurious_amplitude * dir[0],
                    spurious_amplitude * dir[1],
                ]);
            }
        }
    }
    Tensor::new(vec![classes * classes, height, width, INPUT_CHANNELS], data)
}

pub const PRESETS: [&str; 2] = ["spurious-flip", "no-shift"];

/// Defaults shared by the presets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetScale {
    pub samples_per_domain: usize,
    pub classes: usize,
}

impl Default for PresetScale {
    fn default() -> Self {
        Self {
            samples_per_domain: 600,
            classes: 2,
        }
    }
}

pub fn preset_specs(name: &str, samples: usize) -> Result<Vec<DomainSpec>> {
    let base = |id: usize, rho: f64, offset: [f64; 2]| DomainSpec {
        id,
        rho,
        offset,
        stable_amplitude: 0.5,
        spurious_amplitude: 1.0,
        noise_std: 1.0,
        samples,
    };
    match name {
        "spurious-flip" => Ok(vec![
            base(0, 0.9, [1.0, 0.0]),
            base(1, 0.8, [-0.5, 1.0]),
            base(2, 0.7, [-0.5, -1.0]),
            base(3, -0.9, [0.0, 0.0]),
        ]),
        "no-shift" => Ok((0..4).map(|id| base(id, 0.8, [0.0, 0.0])).collect()),
        other => Err(Error::InvalidArgument(format!(
            "unknown benchmark preset '{other}' (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

/// The last spec is the target.
pub fn benchmark_from_specs(
    name: &str,
    specs: &[DomainSpec],
    classes: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Benchmark> {
    if specs.len() < 2 {
        return Err(Error::InvalidArgument(
            "a benchmark needs at least one source and one target".into(),
        ));
    }
    let mut domains = specs
        .iter()
        .map(|s| generate_domain(s, classes, height, width, seed))
        .collect::<Result<Vec<_>>>()?;
    let target = domains.pop().expect("len >= 2");
    Ok(Benchmark {
        name: name.to_string(),
        height,
        width,
        channels: INPUT_CHANNELS,
        classes,
        sources: domains,
        target,
    })
}

pub fn build_benchmark(name: &str, seed: u64) -> Result<Benchmark> {
    build_benchmark_scaled(name, seed, PresetScale::default())
}

pub fn build_benchmark_scaled(name: &str, seed: u64, scale: PresetScale) -> Result<Benchmark> {
    let specs = preset_specs(name, scale.samples_per_domain)?;
    benchmark_from_specs(name, &specs, scale.classes, 8, 8, seed)
}

/// `domain_id,label,f_0,...` with features in row-major `H, W, C` order.
pub fn tabular_csv(benchmark: &Benchmark) -> String {
    let d = benchmark.input_len();
    let mut s = String::from("domain_id,label");
    for i in 0..d {
        let _ = write!(s, ",f_{i}");
    }
    s.push('\n');
    for dom in benchmark.domains() {
        for (r, &y) in dom.labels.iter().enumerate() {
            let _ = write!(s, "{},{y}", dom.id);
            for v in dom.inputs.row(r) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_tabular(benchmark: &Benchmark, path: &Path) -> Result<()> {
    std::fs::write(path, tabular_csv(benchmark)).map_err(|e| Error::io(path, e))
}

/// How a flat feature row is laid out as an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reshape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Reshape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Reshape {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: INPUT_CHANNELS,
        }
    }
}

/// Parses the tabular format. Rows group by `domain_id`; the highest id is
/// the target unless `target` names another.
pub fn parse_tabular(
    text: &str,
    origin: &Path,
    reshape: Reshape,
    target: Option<usize>,
) -> Result<Benchmark> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    if reshape.is_empty() {
        return Err(err(0, "reshape has zero size".into()));
    }
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "domain_id" || cols[1] != "label" {
        return Err(err(1, "header must start with domain_id,label".into()));
    }
    let d = cols.len() - 2;
    if d != reshape.len() {
        return Err(err(
            1,
            format!(
                "{d} feature columns do not fit reshape {}x{}x{}",
                reshape.height, reshape.width, reshape.channels
            ),
        ));
    }
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(err(
                no,
                format!("expected {} columns, found {}", cols.len(), fields.len()),
            ));
        }
        let domain: usize = fields[0].parse().map_err(|_| {
            err(
                no,
                format!("domain_id '{}' is not a non-negative integer", fields[0]),
            )
        })?;
        let label: usize = fields[1].parse().map_err(|_| {
            err(
                no,
                format!("label '{}' is not a non-negative integer", fields[1]),
            )
        })?;
        let entry = groups.entry(domain).or_default();
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|_| err(no, format!("'{f}' is not numeric")))?;
            if !v.is_finite() {
                return Err(err(no, format!("'{f}' is not finite")));
            }
            entry.0.push(v);
        }
        entry.1.push(label);
    }
    if groups.len() < 2 {
        return Err(err(
            0,
            format!("need at least 2 domains, found {}", groups.len()),
        ));
    }
    let target_id = target.unwrap_or_else(|| *groups.keys().next_back().expect("nonempty"));
    if !groups.contains_key(&target_id) {
        return Err(err(0, format!("target domain {target_id} has no rows")));
    }
    let classes = groups
        .values()
        .flat_map(|g| g.1.iter())
        .max()
        .map_or(0, |&m| m + 1)
        .max(2);
    let mut sources = Vec::new();
    let mut tgt = None;
    for (id, (data, labels)) in groups {
        let n = labels.len();
        let dom = Domain {
            id,
            spec: None,
            inputs: Tensor::new(
                vec![n, reshape.height, reshape.width, reshape.channels],
                data,
            )?,
            labels,
        };
        if id == target_id {
            tgt = Some(dom);
        } else {
            sources.push(dom);
        }
    }
    Ok(Benchmark {
        name: origin
            .file_stem()
            .map_or_else(|| "tabular".into(), |s| s.to_string_lossy().into_owned()),
        height: reshape.height,
        width: reshape.width,
        channels: reshape.channels,
        classes,
        sources,
        target: tgt.expect("checked above"),
    })
}

pub fn load_tabular(path: &Path, reshape: Reshape, target: Option<usize>) -> Result<Benchmark> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tabular(&text, path, reshape, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub id: usize,
    pub role: String,
    pub samples: usize,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub domains: Vec<ManifestDomain>,
}

pub fn manifest(benchmark: &Benchmark) -> Manifest {
    let entry = |d: &Domain, role: &str| ManifestDomain {
        id: d.id,
        role: role.into(),
        samples: d.len(),
        rho: d.spec.as_ref().map(|s| s.rho),
    };
    Manifest {
        name: benchmark.name.clone(),
        classes: benchmark.classes,
        height: benchmark.height,
        width: benchmark.width,
        channels: benchmark.channels,
        domains: benchmark
            .sources
            .iter()
            .map(|d| entry(d, "source"))
            .chain(std::iter::once(entry(&benchmark.target, "target")))
            .collect(),
    }
}

pub fn write_manifest(benchmark: &Benchmark, path: &Path) -> Result<()> {
    let text = toml::to_string(&manifest(benchmark)).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-sample spatial means of the spurious channels, `[N, 2]`.
pub fn spurious_summary(domain: &Domain) -> Tensor {
    channel_means(domain, &SPURIOUS_CHANNELS)
}

/// Per-sample spatial means of the listed input channels.
pub fn channel_means(domain: &Domain, channels: &[usize]) -> Tensor {
    let shape = domain.inputs.shape();
    let (pixels, c) = (shape[1] * shape[2], shape[3]);
    let mut out = Vec::with_capacity(domain.len() * channels.len());
    for r in 0..domain.len() {
        let row = domain.inputs.row(r);
        for &ch in channels {
            out.push(row.iter().skip(ch).step_by(c).sum::<f64>() / pixels as f64);
        }
    }
    Tensor::new(vec![domain.len(), channels.len()], out).expect("sized above")
}
