//! Synthetic hybrid-modal grounding data with planted moments.
//!
//! Each video has a latent unit direction `q`. Snippets inside a moment are
//! `normalize(q + n / snr)`, snippets outside are `normalize(n)`, with `n ~ N(0, I / D)`.
//! Queries are noisy views of `q`: text adds isotropic noise, image adds noise with a
//! larger variance, and a segment query is a short run of in-moment-like snippets.
//! Optional drift rotates snippet features by a growing angle along the stream while
//! queries stay fixed.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{GroundTruthFile, QueryEval, QueryGroundTruth};
use crate::model::{Modality, QueryBundle, QueryKind};
use crate::numerics::{dot, norm_sq, Matrix};
use crate::streaming::EmittedPrediction;

pub const DATASET_FORMAT: &str = "ovg-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub train_videos: usize,
    pub eval_videos: usize,
    /// Snippets per video.
    pub video_len: usize,
    pub feature_dim: usize,
    pub moments_min: usize,
    pub moments_max: usize,
    /// Moment length range in snippets, inclusive.
    pub moment_len_min: usize,
    pub moment_len_max: usize,
    pub snr: f64,
    /// Norm scale of the text-query noise.
    pub text_noise: f64,
    /// Image-query noise variance as a multiple of the text-query noise variance.
    pub image_noise_ratio: f64,
    /// Rows of a segment query.
    pub segment_len: usize,
    /// Rotation of the feature basis per snippet, in radians.
    pub drift_rate: f64,
    pub modalities: Vec<Modality>,
    pub snippet_seconds: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_videos: 200,
            eval_videos: 50,
            video_len: 64,
            feature_dim: 16,
            moments_min: 1,
            moments_max: 2,
            moment_len_min: 4,
            moment_len_max: 12,
            snr: 2.0,
            text_noise: 0.5,
            image_noise_ratio: 3.0,
            segment_len: 4,
            drift_rate: 0.0,
            modalities: Modality::ALL.to_vec(),
            snippet_seconds: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.video_len == 0 || self.feature_dim < 2 {
            return fail("video_len must be positive and feature_dim at least 2".into());
        }
        if self.moments_min == 0 || self.moments_min > self.moments_max || self.moments_max > 3 {
            return fail(format!(
                "moments per video must satisfy 1 <= min <= max <= 3, got {}..{}",
                self.moments_min, self.moments_max
            ));
        }
        if self.moment_len_min == 0 || self.moment_len_min > self.moment_len_max {
            return fail("moment length range is empty".into());
        }
        // moments are separated by at least one background snippet
        let needed = self.moments_max * self.moment_len_max + self.moments_max - 1;
        if needed > self.video_len {
            return fail(format!(
                "{} moments of up to {} snippets do not fit in {} snippets",
                self.moments_max, self.moment_len_max, self.video_len
            ));
        }
        if !(self.snr > 0.0) || !(self.text_noise >= 0.0) || !(self.image_noise_ratio > 0.0) {
            return fail("snr, text_noise and image_noise_ratio must be positive".into());
        }
        if self.segment_len == 0 || !(self.snippet_seconds > 0.0) {
            return fail("segment_len and snippet_seconds must be positive".into());
        }
        if !self.drift_rate.is_finite() {
            return fail("drift_rate must be finite".into());
        }
        if self.modalities.is_empty() {
            return fail("at least one query modality must be generated".into());
        }
        Ok(())
    }
}

/// Query features of one video. The image vector is stored once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub text: Option<Vec<f64>>,
    pub image: Option<Vec<f64>>,
    pub segment: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub video_id: String,
    /// `T x D` snippet features.
    pub features: Matrix,
    pub queries: QueryFeatures,
    /// Moments in seconds.
    pub moments: Vec<(f64, f64)>,
    /// The planted direction.
    pub latent: Vec<f64>,
    /// How each query was produced.
    pub sources: Vec<(Modality, String)>,
}

impl DatasetRecord {
    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.queries.text.is_some(),
            Modality::Image => self.queries.image.is_some(),
            Modality::Segment => self.queries.segment.is_some(),
        }
    }

    /// Query bundle for `kind`; an image vector is repeated to `segment_len` rows.
    pub fn query_bundle(&self, kind: &QueryKind, segment_len: usize) -> Result<QueryBundle> {
        let mut parts = Vec::new();
        for &m in kind.modalities() {
            let missing = || Error::Config(format!("record {} has no {m} query", self.video_id));
            let feats = match m {
                Modality::Text => Matrix::row_vector(self.queries.text.as_ref().ok_or_else(missing)?),
                Modality::Image => {
                    let v = self.queries.image.as_ref().ok_or_else(missing)?;
                    let rows = vec![v.clone(); segment_len.max(1)];
                    Matrix::from_rows(&rows)?
                }
                Modality::Segment => self.queries.segment.clone().ok_or_else(missing)?,
            };
            parts.push((m, feats));
        }
        QueryBundle::new(parts)
    }

    fn validate(&self, dim: usize, snippet_seconds: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("record {}: {m}", self.video_id)));
        if self.features.cols() != dim {
            return bad(format!("feature dimension {} != {dim}", self.features.cols()));
        }
        if !self.features.is_finite() {
            return bad("non-finite snippet feature".into());
        }
        let duration = self.features.rows() as f64 * snippet_seconds;
        if self.moments.is_empty() {
            return bad("no moment".into());
        }
        for &(s, e) in &self.moments {
            if !(s < e) || s < 0.0 || e > duration {
                return bad(format!("moment ({s}, {e}) invalid for duration {duration}"));
            }
        }
        for (name, v) in [("text", &self.queries.text), ("image", &self.queries.image)] {
            if let Some(v) = v {
                if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
                    return bad(format!("{name} query has wrong dimension or non-finite values"));
                }
            }
        }
        if let Some(s) = &self.queries.segment {
            if s.cols() != dim || s.rows() == 0 || !s.is_finite() {
                return bad("segment query has wrong shape or non-finite values".into());
            }
        }
        Ok(())
    }
}

/// A generated or loaded split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn video_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1,
        Split::Eval => 2,
    };
    mix(mix(seed ^ mix(tag)) ^ index as u64)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; dim];
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm_sq(&v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn in_moment(rng: &mut ChaCha8Rng, q: &[f64], snr: f64) -> Vec<f64> {
    let d = q.len();
    let noise = gaussian_vec(rng, d, 1.0 / (d as f64).sqrt());
    normalize(q.iter().zip(&noise).map(|(a, n)| a + n / snr).collect())
}

/// Random orthonormal basis (rows) by Gram-Schmidt.
fn orthonormal_basis(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(rng, d, 1.0);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        if norm_sq(&v) > 1e-12 {
            basis.push(normalize(v));
        }
    }
    basis
}

/// Rotates `x` by `angle` in each consecutive plane pair of `basis`.
fn rotate(basis: &[Vec<f64>], x: &[f64], angle: f64) -> Vec<f64> {
    let coords: Vec<f64> = basis.iter().map(|b| dot(b, x)).collect();
    let (sin, cos) = angle.sin_cos();
    let mut rotated = coords.clone();
    for p in 0..coords.len() / 2 {
        let (a, b) = (coords[2 * p], coords[2 * p + 1]);
        rotated[2 * p] = cos * a - sin * b;
        rotated[2 * p + 1] = sin * a + cos * b;
    }
    let mut out = vec![0.0; x.len()];
    for (c, b) in rotated.iter().zip(basis) {
        out.iter_mut().zip(b).for_each(|(o, bi)| *o += c * bi);
    }
    out
}

fn place_moments(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<(usize, usize)> {
    let count = rng.random_range(spec.moments_min..=spec.moments_max);
    let lens: Vec<usize> =
        (0..count).map(|_| rng.random_range(spec.moment_len_min..=spec.moment_len_max)).collect();
    let used: usize = lens.iter().sum::<usize>() + count - 1;
    // distribute the free snippets over count + 1 gaps
    let mut free = spec.video_len - used;
    let mut gaps = vec![0usize; count + 1];
    for g in gaps.iter_mut().take(count) {
        let take = rng.random_range(0..=free);
        *g = take;
        free -= take;
    }
    gaps[count] = free;
    // shuffle gap sizes so the tail is not always the largest
    for i in (1..gaps.len()).rev() {
        let j = rng.random_range(0..=i);
        gaps.swap(i, j);
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = gaps[0];
    for (i, len) in lens.iter().enumerate() {
        out.push((pos, pos + len));
        pos += len + 1 + gaps[i + 1];
    }
    out
}

fn generate_video(spec: &SyntheticSpec, split: Split, index: usize) -> DatasetRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(spec.seed, split, index));
    let d = spec.feature_dim;
    let q = normalize(gaussian_vec(&mut rng, d, 1.0));
    let spans = place_moments(&mut rng, spec);
    let basis = (spec.drift_rate != 0.0).then(|| orthonormal_basis(&mut rng, d));
    let mut features = Matrix::zeros(spec.video_len, d);
    for t in 0..spec.video_len {
        let inside = spans.iter().any(|&(s, e)| t >= s && t < e);
        let row = if inside {
            in_moment(&mut rng, &q, spec.snr)
        } else {
            normalize(gaussian_vec(&mut rng, d, 1.0 / (d as f64).sqrt()))
        };
        let row = match &basis {
            Some(b) => rotate(b, &row, spec.drift_rate * t as f64),
            None => row,
        };
        features.row_mut(t).copy_from_slice(&row);
    }
    let text_std = spec.text_noise / (d as f64).sqrt();
    let image_std = text_std * spec.image_noise_ratio.sqrt();
    let noisy = |rng: &mut ChaCha8Rng, std: f64| -> Vec<f64> {
        q.iter().zip(gaussian_vec(rng, d, std)).map(|(a, n)| a + n).collect()
    };
    let mut queries = QueryFeatures { text: None, image: None, segment: None };
    let mut sources = Vec::new();
    for m in Modality::ALL {
        if !spec.modalities.contains(&m) {
            continue;
        }
        match m {
            Modality::Text => {
                queries.text = Some(noisy(&mut rng, text_std));
                sources.push((m, format!("latent + N(0, {text_std:.4}^2)")));
            }
            Modality::Image => {
                queries.image = Some(noisy(&mut rng, image_std));
                sources.push((m, format!("latent + N(0, {image_std:.4}^2)")));
            }
            Modality::Segment => {
                let rows: Vec<Vec<f64>> =
                    (0..spec.segment_len).map(|_| in_moment(&mut rng, &q, spec.snr)).collect();
                queries.segment = Some(Matrix::from_rows(&rows).expect("segment rows"));
                sources.push((m, format!("{} in-moment draws", spec.segment_len)));
            }
        }
    }
    let m = spec.snippet_seconds;
    DatasetRecord {
        video_id: format!("{}-{index:05}", split_name(split)),
        features,
        queries,
        moments: spans.iter().map(|&(s, e)| (s as f64 * m, e as f64 * m)).collect(),
        latent: q,
        sources,
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}

/// Generates one split; videos are produced in parallel and returned in id order.
pub fn generate(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let n = match split {
        Split::Train => spec.train_videos,
        Split::Eval => spec.eval_videos,
    };
    let records = (0..n).into_par_iter().map(|i| generate_video(spec, split, i)).collect();
    Ok(Dataset { spec: spec.clone(), records })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    records: usize,
    spec: SyntheticSpec,
}

/// JSON Lines: a header line, then one record per line.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        records: data.records.len(),
        spec: data.spec.clone(),
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for r in &data.records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, detail: String| Error::Parse { path: path.into(), line, detail };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse(1, "missing header line".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(parse(
            1,
            format!("unsupported format {} version {}", header.format, header.version),
        ));
    }
    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| parse(i + 2, e.to_string()))?;
        record.validate(header.spec.feature_dim, header.spec.snippet_seconds)?;
        records.push(record);
    }
    if records.len() != header.records {
        return Err(Error::Validation(format!(
            "{}: header announces {} records, found {}",
            path.display(),
            header.records,
            records.len()
        )));
    }
    Ok(Dataset { spec: header.spec, records })
}

pub fn ground_truth(data: &Dataset) -> GroundTruthFile {
    GroundTruthFile {
        version: 1,
        queries: data
            .records
            .iter()
            .map(|r| QueryGroundTruth { query_id: r.video_id.clone(), moments: r.moments.clone() })
            .collect(),
    }
}

/// Offline detector: cosine of the (mean) query vector with each snippet, thresholded
/// at half the cosine expected inside a moment; contiguous runs become predictions
/// scored by run length.
pub fn matched_filter(data: &Dataset, kind: &QueryKind) -> Result<Vec<QueryEval>> {
    let spec = &data.spec;
    let expected = 1.0 / (1.0 + 1.0 / (spec.snr * spec.snr)).sqrt();
    let threshold = 0.5 * expected;
    data.records
        .iter()
        .map(|r| {
            let bundle = r.query_bundle(kind, spec.segment_len)?;
            let d = spec.feature_dim;
            let mut probe = vec![0.0; d];
            let mut rows = 0.0;
            for (_, feats) in bundle.parts() {
                for i in 0..feats.rows() {
                    probe.iter_mut().zip(feats.row(i)).for_each(|(p, x)| *p += x);
                    rows += 1.0;
                }
            }
            probe.iter_mut().for_each(|p| *p /= rows);
            let probe = normalize(probe);
            let hits: Vec<bool> = (0..r.features.rows())
                .map(|t| {
                    let f = r.features.row(t);
                    dot(&probe, f) / norm_sq(f).sqrt().max(1e-12) > threshold
                })
                .collect();
            let mut predictions = Vec::new();
            let mut t = 0;
            while t < hits.len() {
                if hits[t] {
                    let start = t;
                    while t < hits.len() && hits[t] {
                        t += 1;
                    }
                    let m = spec.snippet_seconds;
                    predictions.push(EmittedPrediction {
                        s: start as f64 * m,
                        e: t as f64 * m,
                        score: (t - start) as f64 / hits.len() as f64,
                        emit_time: t as f64 * m,
                    });
                } else {
                    t += 1;
                }
            }
            Ok(QueryEval { query_id: r.video_id.clone(), predictions, moments: r.moments.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::offline_metrics;

    fn small() -> SyntheticSpec {
        SyntheticSpec { train_videos: 6, eval_videos: 3, video_len: 32, seed: 5, ..SyntheticSpec::default() }
    }

    #[test]
    fn noiseless_moments_align_with_latent() {
        let spec = SyntheticSpec { snr: 1e9, ..small() };
        let data = generate(&spec, Split::Train).unwrap();
        for r in &data.records {
            for &(s, e) in &r.moments {
                for t in (s / 2.0) as usize..(e / 2.0) as usize {
                    assert!(dot(r.features.row(t), &r.latent) > 1.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate(&small(), Split::Train).unwrap();
        let b = generate(&small(), Split::Train).unwrap();
        assert_eq!(a, b);
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_dataset(&pa, &a).unwrap();
        write_dataset(&pb, &b).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
        assert_eq!(read_dataset(&pa).unwrap(), a);
    }

    #[test]
    fn moments_are_in_bounds_and_disjoint() {
        let spec = SyntheticSpec { train_videos: 200, moments_max: 3, video_len: 40, ..small() };
        for r in generate(&spec, Split::Train).unwrap().records {
            let mut prev_end = -1.0;
            for &(s, e) in &r.moments {
                assert!(s < e && s >= 0.0 && e <= 80.0);
                assert!(s > prev_end);
                prev_end = e;
            }
        }
    }

    #[test]
    fn image_noise_variance_follows_ratio() {
        let spec = SyntheticSpec { train_videos: 1000, video_len: 26, ..small() };
        let data = generate(&spec, Split::Train).unwrap();
        let var = |f: &dyn Fn(&DatasetRecord) -> &Vec<f64>| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for r in &data.records {
                for (x, q) in f(r).iter().zip(&r.latent) {
                    acc += (x - q) * (x - q);
                    n += 1.0;
                }
            }
            acc / n
        };
        let text = var(&|r| r.queries.text.as_ref().unwrap());
        let image = var(&|r| r.queries.image.as_ref().unwrap());
        let ratio = image / text;
        assert!((ratio - 3.0).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let spec = SyntheticSpec { video_len: 10, moment_len_max: 12, ..small() };
        assert!(matches!(generate(&spec, Split::Train), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_files_report_lines_and_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = generate(&small(), Split::Eval).unwrap();
        write_dataset(&path, &data).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let truncated = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
        fs::write(&path, truncated).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bad = data.clone();
        bad.records[1].moments[0] = (8.0, 8.0);
        write_dataset(&path, &bad).unwrap();
        match read_dataset(&path) {
            Err(Error::Validation(m)) => assert!(m.contains(&bad.records[1].video_id)),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn matched_filter_finds_text_moments() {
        let spec = SyntheticSpec { train_videos: 0, eval_videos: 30, ..SyntheticSpec::default() };
        let data = generate(&spec, Split::Eval).unwrap();
        let evals = matched_filter(&data, &QueryKind::single(Modality::Text)).unwrap();
        let (r1, _) = offline_metrics(&evals, 1, 0.5).unwrap();
        assert!(r1 >= 0.9, "R@1 {r1}");
    }
}
