use std::path::{Path, PathBuf};

use augoverlap::eval::{BoundsConfig, ProbeConfig};
use augoverlap::graph::DEFAULT_CONNECT_FACTOR;
use augoverlap::metrics::SweepMetricsConfig;
use augoverlap::sphere::{pole_centers, synthetic_split, UnitVector, TEST_SEED_OFFSET};
use augoverlap::{make_dataset, CapSize, LabeledSphereDataset, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

const PRESETS: &[(&str, &str)] = &[
    ("paper_synthetic", include_str!("../presets/paper_synthetic.json")),
    ("fig12_sweep", include_str!("../presets/fig12_sweep.json")),
    ("bounds_M_sweep", include_str!("../presets/bounds_M_sweep.json")),
    ("scaling_d2", include_str!("../presets/scaling_d2.json")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub graph: GraphSection,
    pub metrics: MetricsSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Class centers; the two poles of S² when absent.
    pub centers: Option<Vec<Vec<f64>>>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub cap: CapSize,
    /// Load the training set from `id,label,x0,...` instead of sampling it.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            centers: None,
            train_per_class: 2500,
            test_per_class: 500,
            cap: CapSize::Area(1.0),
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub r: f64,
    pub connect_factor: f64,
    /// Diameters in sweeps and bounds use an even-stride subsample of this size.
    pub diameter_max_nodes: usize,
    pub scaling: ScalingSection,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            r: 0.1,
            connect_factor: DEFAULT_CONNECT_FACTOR,
            diameter_max_nodes: 1000,
            scaling: ScalingSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    pub d: usize,
    pub trials: usize,
    pub cap: CapSize,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            n_list: vec![100, 400, 1600, 6400],
            d: 2,
            trials: 20,
            cap: CapSize::Area(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    #[serde(rename = "C")]
    pub views: usize,
    pub k: usize,
    pub max_sources: usize,
    pub probe: ProbeConfig,
    /// Imported `source_id,view_index,z0,...` dumps; `features_init` enables ARC.
    pub features: Option<PathBuf>,
    pub features_init: Option<PathBuf>,
    pub bounds: BoundsConfig,
    #[serde(rename = "M_list")]
    pub m_list: Vec<usize>,
    #[serde(rename = "lse_M_list")]
    pub lse_m_list: Vec<usize>,
    pub lse_trials: usize,
    pub counterexample: CounterexampleSection,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let d = SweepMetricsConfig::default();
        Self {
            views: d.views,
            k: d.k,
            max_sources: d.max_sources,
            probe: d.probe,
            features: None,
            features_init: None,
            bounds: BoundsConfig::default(),
            m_list: vec![512],
            lse_m_list: vec![8, 32, 128, 512],
            lse_trials: 200,
            counterexample: CounterexampleSection::default(),
        }
    }
}

impl MetricsSection {
    pub fn sweep_metrics(&self) -> SweepMetricsConfig {
        SweepMetricsConfig {
            views: self.views,
            k: self.k,
            max_sources: self.max_sources,
            probe: self.probe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CounterexampleSection {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: usize,
}

impl Default for CounterexampleSection {
    fn default() -> Self {
        Self {
            n: 10_000,
            k: 2,
            m: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub r_list: Vec<f64>,
    /// One training run per seed and strength.
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            r_list: vec![0.0, 0.02, 0.05, 0.1, 0.5, 1.5],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| {
                let known: Vec<_> = preset_names().collect();
                CliError::Config(format!("unknown preset {name:?}; known: {}", known.join(", ")))
            })?;
        Self::from_json(text)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies the seed override and propagates the seed to training.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(dir) = out {
            self.output.dir = dir;
        }
        self.train.seed = self.seed;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sweep.seeds.is_empty() {
            self.sweep.seeds.push(self.seed);
        }
        self.sweep.r_list.sort_by(f64::total_cmp);
        Ok(self)
    }

    fn centers(&self) -> Result<Vec<UnitVector>, CliError> {
        match &self.dataset.centers {
            None => Ok(pole_centers()),
            Some(cs) => cs
                .iter()
                .map(|c| UnitVector::new(c.clone()).map_err(|e| CliError::Config(e.to_string())))
                .collect(),
        }
    }

    pub fn datasets(&self, seed: u64) -> Result<(LabeledSphereDataset, LabeledSphereDataset), CliError> {
        let d = &self.dataset;
        if let Some(path) = &d.train_csv {
            let train = LabeledSphereDataset::read_csv(std::fs::File::open(path)?)?;
            let test = match &d.test_csv {
                Some(p) => LabeledSphereDataset::read_csv(std::fs::File::open(p)?)?,
                None => train.clone(),
            };
            return Ok((train, test));
        }
        if d.centers.is_none() {
            return Ok(synthetic_split(d.train_per_class, d.test_per_class, d.cap, seed)?);
        }
        let centers = self.centers()?;
        let train = make_dataset(&centers, d.train_per_class, d.cap, seed)?;
        let test = make_dataset(&centers, d.test_per_class, d.cap, seed.wrapping_add(TEST_SEED_OFFSET))?;
        Ok((train, test))
    }
}
