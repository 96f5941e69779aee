//! Confusion ratio (CR), its average (ACR) and the ARC ratio, from exact
//! k-nearest-neighbour search over augmented views.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{invalid, Error, Result};
use crate::eval::{linear_probe, parse_field, FeatureTable, ProbeConfig};
use crate::sphere::{augment, norm, LabeledSphereDataset};

pub const DEFAULT_VIEWS: usize = 10;
pub const DEFAULT_K: usize = 1;

/// `C` encoded views of each of `N` sources, plus the neighbour count `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFeatureSet {
    pub source_ids: Vec<usize>,
    pub view_index: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    n_sources: usize,
    views: usize,
    k: usize,
}

impl AugmentedFeatureSet {
    /// Validates the layout; rows off the unit sphere are re-normalized with a warning.
    pub fn new(
        source_ids: Vec<usize>,
        view_index: Vec<usize>,
        mut features: Vec<Vec<f64>>,
        k: usize,
    ) -> Result<Self> {
        let n = features.len();
        if source_ids.len() != n || view_index.len() != n {
            return Err(invalid("source_ids, view_index and features must have equal length"));
        }
        if n == 0 {
            return Err(invalid("empty feature set"));
        }
        let dim = features[0].len();
        if let Some(row) = features.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        let mut per_source: BTreeMap<usize, usize> = BTreeMap::new();
        for &s in &source_ids {
            *per_source.entry(s).or_default() += 1;
        }
        let views = *per_source.values().next().unwrap_or(&0);
        if per_source.values().any(|&c| c != views) {
            return Err(invalid("every source must have the same number of views"));
        }
        if k < 1 || k > n - 1 {
            return Err(invalid(format!("k = {k} must lie in [1, {}]", n - 1)));
        }
        let mut renormalized = false;
        for row in features.iter_mut() {
            let l = norm(row);
            if !l.is_finite() || l == 0.0 {
                return Err(invalid("feature rows must be finite and non-zero"));
            }
            if (l - 1.0).abs() > crate::eval::FEATURE_NORM_TOL {
                row.iter_mut().for_each(|v| *v /= l);
                renormalized = true;
            }
        }
        if renormalized {
            log::warn!("augmented feature rows were not unit-norm and have been re-normalized");
        }
        Ok(Self {
            source_ids,
            view_index,
            features,
            n_sources: per_source.len(),
            views,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn with_k(self, k: usize) -> Result<Self> {
        Self::new(self.source_ids, self.view_index, self.features, k)
    }

    /// Reads `source_id,view_index,z0,...`.
    pub fn read_csv<R: Read>(r: R, k: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "source_id" || &header[1] != "view_index" {
            return Err(Error::Parse(
                "augmented feature header must be source_id,view_index,z0,...".into(),
            ));
        }
        let (mut ids, mut views, mut features) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            ids.push(parse_field::<usize>(&rec[0], "source_id")?);
            views.push(parse_field::<usize>(&rec[1], "view_index")?);
            features.push(
                rec.iter()
                    .skip(2)
                    .map(|s| parse_field::<f64>(s, "feature"))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::new(ids, views, features, k)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let dim = self.features[0].len();
        let mut header = vec!["source_id".to_string(), "view_index".to_string()];
        header.extend((0..dim).map(|i| format!("z{i}")));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.source_ids[i].to_string(), self.view_index[i].to_string()];
            row.extend(self.features[i].iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Encodes `views` augmentations at strength `r` of every sample.
///
/// Views are drawn sequentially from one seeded generator in dataset order,
/// then embedded in parallel.
pub fn build_augmented_features<E: Encoder + ?Sized>(
    enc: &E,
    dataset: &LabeledSphereDataset,
    views: usize,
    r: f64,
    k: usize,
    seed: u64,
) -> Result<AugmentedFeatureSet> {
    if views < 2 {
        return Err(invalid(format!("C = {views} views; at least 2 are required")));
    }
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(dataset.len() * views);
    let mut source_ids = Vec::with_capacity(points.capacity());
    let mut view_index = Vec::with_capacity(points.capacity());
    for (i, x) in dataset.points.iter().enumerate() {
        for j in 0..views {
            points.push(augment(x, r, &mut rng)?);
            source_ids.push(i);
            view_index.push(j);
        }
    }
    let features: Vec<Vec<f64>> = points.par_iter().map(|p| enc.embed(p)).collect();
    AugmentedFeatureSet::new(source_ids, view_index, features, k)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub cr_values: Vec<f64>,
    pub acr: f64,
    pub k: usize,
    #[serde(rename = "C")]
    pub views: usize,
    pub distance: Distance,
}

impl ConfusionReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Row indices of the `k` nearest rows to `query`, excluding `query` itself,
/// nearest first; equal distances are ordered by row index.
pub fn nearest_neighbors(features: &[Vec<f64>], query: usize, k: usize) -> Vec<usize> {
    let q = &features[query];
    let mut cand: Vec<(f64, usize)> = features
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != query)
        .map(|(j, z)| (squared_distance(q, z), j))
        .collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_distance_then_index);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_distance_then_index);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// CR of every row and their mean.
pub fn confusion_ratio_all(set: &AugmentedFeatureSet) -> ConfusionReport {
    let k = set.k;
    let cr_values: Vec<f64> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let foreign = nearest_neighbors(&set.features, i, k)
                .into_iter()
                .filter(|&j| set.source_ids[j] != set.source_ids[i])
                .count();
            foreign as f64 / k as f64
        })
        .collect();
    let acr = cr_values.iter().sum::<f64>() / cr_values.len() as f64;
    ConfusionReport {
        cr_values,
        acr,
        k,
        views: set.views,
        distance: Distance::Euclidean,
    }
}

/// `(1 − acr_final) / (1 − acr_init)`; `+∞` when `acr_init = 1`.
pub fn arc(acr_init: f64, acr_final: f64) -> Result<f64> {
    let unit = 0.0..=1.0;
    if !unit.contains(&acr_init) || !unit.contains(&acr_final) {
        return Err(invalid(format!(
            "ACR values must lie in [0, 1], got init {acr_init} and final {acr_final}"
        )));
    }
    if acr_init == 1.0 {
        log::warn!("initial ACR is 1; ARC is unbounded");
        return Ok(f64::INFINITY);
    }
    Ok((1.0 - acr_final) / (1.0 - acr_init))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepMetricsConfig {
    #[serde(rename = "C")]
    pub views: usize,
    pub k: usize,
    /// ACR is computed on an even-stride subsample of at most this many sources.
    pub max_sources: usize,
    pub probe: ProbeConfig,
}

impl Default for SweepMetricsConfig {
    fn default() -> Self {
        Self {
            views: DEFAULT_VIEWS,
            k: DEFAULT_K,
            max_sources: 500,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: f64,
    pub acr_init: f64,
    pub acr_final: f64,
    pub arc: f64,
    pub probe_acc: f64,
}

/// One row per strength: ACR of the initial and trained encoder on views at
/// that strength, their ARC, and the trained encoder's probe accuracy.
pub fn acr_sweep<E0, E>(
    train: &LabeledSphereDataset,
    test: &LabeledSphereDataset,
    encoder_init: &E0,
    encoders_final: &[E],
    r_list: &[f64],
    cfg: &SweepMetricsConfig,
    seed: u64,
) -> Result<Vec<SweepRow>>
where
    E0: Encoder + ?Sized,
    E: Encoder,
{
    if encoders_final.len() != r_list.len() {
        return Err(invalid(format!(
            "{} trained encoders for {} strengths",
            encoders_final.len(),
            r_list.len()
        )));
    }
    let acr_set = train.subsample(cfg.max_sources);
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    r_list
        .iter()
        .zip(encoders_final)
        .map(|(&r, enc)| {
            let view_seed: u64 = seeds.random();
            let init = build_augmented_features(encoder_init, &acr_set, cfg.views, r, cfg.k, view_seed)?;
            let fin = build_augmented_features(enc, &acr_set, cfg.views, r, cfg.k, view_seed)?;
            let acr_init = confusion_ratio_all(&init).acr;
            let acr_final = confusion_ratio_all(&fin).acr;
            let k = train.num_classes().max(test.num_classes());
            let train_t = FeatureTable::from_encoder(enc, train)?.with_num_classes(k);
            let test_t = FeatureTable::from_encoder(enc, test)?.with_num_classes(k);
            let probe = linear_probe(&train_t, &test_t, &cfg.probe)?;
            Ok(SweepRow {
                r,
                acr_init,
                acr_final,
                arc: arc(acr_init, acr_final)?,
                probe_acc: probe.test_acc,
            })
        })
        .collect()
}

/// Writes `r,acr_init,acr_final,arc,probe_acc`; an unbounded ARC is written as `inf`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["r", "acr_init", "acr_final", "arc", "probe_acc"])?;
    for row in rows {
        let arc = if row.arc.is_infinite() {
            "inf".to_string()
        } else {
            row.arc.to_string()
        };
        out.write_record([
            row.r.to_string(),
            row.acr_init.to_string(),
            row.acr_final.to_string(),
            arc,
            row.probe_acc.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::IdentityEncoder;
    use crate::sphere::{make_dataset, pole_centers, CapSize};

    fn line_set(positions: &[f64], sources: &[usize], k: usize) -> AugmentedFeatureSet {
        // embed 1-D positions on a tiny arc so rows stay unit-norm and order-preserving
        let features = positions
            .iter()
            .map(|&p| vec![(p * 0.01).cos(), (p * 0.01).sin()])
            .collect();
        let mut counts = BTreeMap::new();
        let views = sources
            .iter()
            .map(|&s| {
                let c = counts.entry(s).or_insert(0);
                *c += 1;
                *c - 1
            })
            .collect();
        AugmentedFeatureSet::new(sources.to_vec(), views, features, k).unwrap()
    }

    #[test]
    fn alternating_line_is_fully_confused() {
        let set = line_set(&[0.0, 1.0, 2.0, 3.0], &[0, 1, 0, 1], 1);
        let rep = confusion_ratio_all(&set);
        assert_eq!(rep.cr_values, vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(rep.acr, 1.0);
    }

    #[test]
    fn tight_clusters_are_unconfused() {
        let set = line_set(&[0.0, 0.01, 10.0, 10.01, 20.0, 20.01], &[0, 0, 1, 1, 2, 2], 1);
        let rep = confusion_ratio_all(&set);
        assert!(rep.cr_values.iter().all(|&c| c == 0.0));
        assert_eq!(rep.acr, 0.0);
    }

    #[test]
    fn ties_go_to_smaller_index() {
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0], vec![-1.0, 0.0]];
        assert_eq!(nearest_neighbors(&f, 0, 2), vec![1, 2]);
        assert_eq!(nearest_neighbors(&f, 3, 1), vec![1]);
    }

    #[test]
    fn arc_cases() {
        assert_eq!(arc(0.3, 0.3).unwrap(), 1.0);
        assert_eq!(arc(0.5, 0.0).unwrap(), 2.0);
        assert_eq!(arc(0.0, 0.0).unwrap(), 1.0);
        assert!(arc(1.0, 0.5).unwrap().is_infinite());
        assert!(arc(1.2, 0.5).is_err());
        assert!(arc(0.5, -0.1).is_err());
    }

    #[test]
    fn build_rejects_single_view_and_counts_rows() {
        let ds = make_dataset(&pole_centers(), 15, CapSize::Area(1.0), 3).unwrap();
        let id = IdentityEncoder { dim: 3 };
        assert!(build_augmented_features(&id, &ds, 1, 0.1, 1, 0).is_err());
        let set = build_augmented_features(&id, &ds, 4, 0.1, 1, 0).unwrap();
        assert_eq!(set.len(), 30 * 4);
        assert_eq!(set.views(), 4);
        assert_eq!(set.n_sources(), 30);
    }

    #[test]
    fn zero_strength_views_coincide() {
        let ds = make_dataset(&pole_centers(), 15, CapSize::Area(1.0), 3).unwrap();
        let id = IdentityEncoder { dim: 3 };
        let set = build_augmented_features(&id, &ds, 5, 0.0, 1, 9).unwrap();
        for (i, z) in set.features.iter().enumerate() {
            assert_eq!(z.as_slice(), ds.points[set.source_ids[i]].as_slice());
        }
        assert_eq!(confusion_ratio_all(&set).acr, 0.0);
    }

    #[test]
    fn invalid_layouts() {
        let f = vec![vec![1.0, 0.0]; 3];
        assert!(AugmentedFeatureSet::new(vec![0, 0, 1], vec![0, 1, 0], f.clone(), 1).is_err());
        let f = vec![vec![1.0, 0.0]; 4];
        assert!(AugmentedFeatureSet::new(vec![0, 0, 1, 1], vec![0, 1, 0, 1], f.clone(), 4).is_err());
        assert!(AugmentedFeatureSet::new(vec![0, 0, 1, 1], vec![0, 1, 0, 1], f, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_sweep_format() {
        let set = line_set(&[0.0, 1.0, 2.0, 3.0], &[0, 1, 0, 1], 1);
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = AugmentedFeatureSet::read_csv(buf.as_slice(), 1).unwrap();
        assert_eq!(back.features, set.features);
        assert_eq!(back.source_ids, set.source_ids);

        let rows = [SweepRow {
            r: 0.1,
            acr_init: 1.0,
            acr_final: 0.5,
            arc: f64::INFINITY,
            probe_acc: 0.9,
        }];
        let mut out = Vec::new();
        write_sweep_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "r,acr_init,acr_final,arc,probe_acc\n0.1,1,0.5,inf,0.9\n");
    }
}
