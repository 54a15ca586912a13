//! Narrative clips: synthetic generation, the on-disk corpus layout, and
//! target-disjoint partitioning.
//!
//! Layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<clip>/visual.csv        timestamp,f0,...,f{d-1}
//! <root>/<clip>/acoustic.csv
//! <root>/<clip>/linguistic.csv
//! <root>/<clip>/ratings/obs_<n>.csv   timestamp,value
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ewe, human_benchmark, EweOptions, RatingSeries};
use crate::tensor::RngState;
use crate::windowing::{align_ratings, window_count, ModalityStream};
use crate::Modality;

/// Observer ratings are sampled on this period (seconds).
pub const RATING_PERIOD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct NarrativeClip {
    pub id: String,
    pub target: String,
    pub duration: f64,
    pub streams: BTreeMap<Modality, ModalityStream>,
    pub ratings: Vec<RatingSeries>,
}

impl NarrativeClip {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Data(format!("clip {}: non-positive duration {}", self.id, self.duration)));
        }
        for s in self.streams.values() {
            if let (Some(first), Some(last)) = (s.timestamps().first(), s.timestamps().last()) {
                if *first < 0.0 || *last >= self.duration {
                    return Err(Error::Data(format!(
                        "clip {}: {} samples span [{first}, {last}], outside [0, {})",
                        self.id, s.modality, self.duration
                    )));
                }
            }
        }
        for (j, r) in self.ratings.iter().enumerate() {
            if let Some(v) = r.values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::Data(format!("clip {}: observer {j} rating {v} outside [-1, 1]", self.id)));
            }
        }
        Ok(())
    }

    /// Observer traces truncated to their common length.
    fn observer_slices(&self) -> Result<Vec<&[f64]>> {
        let n = self.ratings.iter().map(|r| r.len()).min().unwrap_or(0);
        if n == 0 {
            return Err(Error::Data(format!("clip {} has no ratings", self.id)));
        }
        Ok(self.ratings.iter().map(|r| &r.values[..n]).collect())
    }

    /// Evaluator-weighted gold standard on the rating grid.
    pub fn gold(&self) -> Result<RatingSeries> {
        let e = ewe(&self.observer_slices()?, EweOptions::default())?;
        Ok(RatingSeries::new(RATING_PERIOD, e.values))
    }

    /// Gold standard averaged onto `tau`-second windows.
    pub fn gold_windows(&self, tau: f64) -> Result<RatingSeries> {
        align_ratings(&self.gold()?, tau, window_count(self.duration, tau))
    }

    /// Leave-one-out agreement of the observers with one another.
    pub fn human_benchmark(&self) -> Result<f64> {
        human_benchmark(&self.observer_slices()?, EweOptions::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub dims: BTreeMap<Modality, usize>,
    /// Nominal sampling period per modality (seconds).
    pub periods: BTreeMap<Modality, f64>,
    pub rating_period: f64,
    /// Generator settings when the corpus is synthetic.
    pub synthetic: Option<SynthConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub clips: Vec<NarrativeClip>,
}

impl Corpus {
    pub fn targets(&self) -> BTreeSet<&str> {
        self.clips.iter().map(|c| c.target.as_str()).collect()
    }

    pub fn clip(&self, id: &str) -> Option<&NarrativeClip> {
        self.clips.iter().find(|c| c.id == id)
    }

    pub fn provenance(&self) -> &'static str {
        if self.meta.synthetic.is_some() {
            "synthetic"
        } else {
            "external"
        }
    }
}

/// Mapping from the latent valence to features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMap {
    #[default]
    Linear,
    /// `tanh` of the linear map, squashing large excursions.
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub targets: usize,
    pub clips_per_target: usize,
    /// Mean clip length in seconds; lengths are whole seconds.
    pub duration_mean: f64,
    /// Half-width of the uniform spread around the mean.
    pub duration_jitter: f64,
    pub dims: BTreeMap<Modality, usize>,
    pub periods: BTreeMap<Modality, f64>,
    /// Half-width of the uniform jitter on linguistic event times.
    pub word_jitter: f64,
    pub observers: usize,
    pub observer_noise: f64,
    /// Observer delay behind the latent signal, seconds.
    pub observer_lag: f64,
    /// Random-walk step standard deviation per 0.1 s.
    pub latent_step: f64,
    /// Moving-average width of the latent smoothing, in 0.1 s steps.
    pub latent_smoothness: usize,
    pub feature_noise: f64,
    pub feature_map: FeatureMap,
    pub seed: u64,
}

/// Latent resolution in seconds.
const LATENT_DT: f64 = 0.1;

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            targets: 49,
            clips_per_target: 1,
            duration_mean: 135.0,
            duration_jitter: 15.0,
            dims: [(Modality::Visual, 32), (Modality::Acoustic, 16), (Modality::Linguistic, 50)]
                .into_iter()
                .collect(),
            periods: [(Modality::Visual, 0.1), (Modality::Acoustic, 1.0), (Modality::Linguistic, 0.3)]
                .into_iter()
                .collect(),
            word_jitter: 0.1,
            observers: 20,
            observer_noise: 0.15,
            observer_lag: 0.5,
            latent_step: 0.05,
            latent_smoothness: 20,
            feature_noise: 0.5,
            feature_map: FeatureMap::Linear,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Feature widths of the original extractors (1000 / 88 / 300).
    pub fn paper_dims() -> BTreeMap<Modality, usize> {
        [(Modality::Visual, 1000), (Modality::Acoustic, 88), (Modality::Linguistic, 300)]
            .into_iter()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.targets == 0 || self.clips_per_target == 0 {
            return bad("need at least one target and one clip per target".into());
        }
        if self.observers < 2 {
            return bad(format!("need at least 2 observers, got {}", self.observers));
        }
        if !(self.duration_mean - self.duration_jitter >= 1.0) {
            return bad(format!(
                "durations {} ± {} must stay at least one second",
                self.duration_mean, self.duration_jitter
            ));
        }
        for m in Modality::ALL {
            match (self.dims.get(&m), self.periods.get(&m)) {
                (Some(&d), Some(&p)) if d > 0 && p > 0.0 => {}
                _ => return bad(format!("modality {m} needs a positive width and period")),
            }
        }
        if self.word_jitter < 0.0 || 2.0 * self.word_jitter >= self.periods[&Modality::Linguistic] {
            return bad("word jitter must be under half the word period".into());
        }
        if self.observer_noise < 0.0 || self.feature_noise < 0.0 || self.latent_step < 0.0 || self.observer_lag < 0.0 {
            return bad("noise levels, step and lag must be non-negative".into());
        }
        if self.latent_smoothness == 0 {
            return bad("latent smoothness must be at least 1".into());
        }
        Ok(())
    }
}

fn round6(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

fn modality_index(m: Modality) -> u64 {
    match m {
        Modality::Visual => 0,
        Modality::Acoustic => 1,
        Modality::Linguistic => 2,
    }
}

/// Clipped, smoothed random walk on a 0.1 s grid.
fn latent_trace(cfg: &SynthConfig, duration: f64, rng: &mut RngState) -> Vec<f64> {
    let n = (duration / LATENT_DT).round() as usize + 1;
    let mut walk = Vec::with_capacity(n);
    let mut x = rng.uniform(-0.5, 0.5);
    for _ in 0..n {
        x = (x + rng.normal(0.0, cfg.latent_step)).clamp(-1.0, 1.0);
        walk.push(x);
    }
    let w = cfg.latent_smoothness;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(w - 1);
            let s: f64 = walk[lo..=i].iter().sum();
            (s / (i - lo + 1) as f64).clamp(-1.0, 1.0)
        })
        .collect()
}

fn latent_at(latent: &[f64], t: f64) -> f64 {
    let i = ((t.max(0.0) / LATENT_DT) + 1e-9).floor() as usize;
    latent[i.min(latent.len() - 1)]
}

/// Generates a corpus; every clip depends only on `(seed, clip index)`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    // fixed latent-to-feature maps shared by all clips
    let maps: BTreeMap<Modality, (Vec<f64>, Vec<f64>)> = Modality::ALL
        .iter()
        .map(|&m| {
            let mut rng = RngState::with_stream(cfg.seed, u64::MAX - modality_index(m));
            let d = cfg.dims[&m];
            let gain = (0..d).map(|_| rng.normal(0.0, 1.0)).collect();
            let bias = (0..d).map(|_| rng.normal(0.0, 0.2)).collect();
            (m, (gain, bias))
        })
        .collect();

    let n_clips = cfg.targets * cfg.clips_per_target;
    let mut clips = Vec::with_capacity(n_clips);
    for idx in 0..n_clips {
        let stream = |k: u64| RngState::with_stream(cfg.seed, idx as u64 * 8 + k);
        let mut rng = stream(3);
        let duration = (cfg.duration_mean + rng.uniform(-cfg.duration_jitter, cfg.duration_jitter)).round();
        let latent = latent_trace(cfg, duration, &mut rng);

        let mut streams = BTreeMap::new();
        for m in Modality::ALL {
            let mut rng = stream(modality_index(m));
            let (gain, bias) = &maps[&m];
            let period = cfg.periods[&m];
            let count = (duration / period + 1e-9).floor() as usize;
            let mut s = ModalityStream::new(m, gain.len());
            let mut v = vec![0.0; gain.len()];
            for k in 0..count {
                let mut t = k as f64 * period;
                if m == Modality::Linguistic {
                    t += rng.uniform(-cfg.word_jitter, cfg.word_jitter);
                }
                let t = round6(t.clamp(0.0, duration - 1e-6));
                let z = latent_at(&latent, t);
                for (j, out) in v.iter_mut().enumerate() {
                    let clean = gain[j] * z + bias[j];
                    let clean = match cfg.feature_map {
                        FeatureMap::Linear => clean,
                        FeatureMap::Tanh => clean.tanh(),
                    };
                    *out = clean + rng.normal(0.0, cfg.feature_noise);
                }
                s.push(t, &v)?;
            }
            streams.insert(m, s);
        }

        let mut rng = stream(4);
        let n_ratings = (duration / RATING_PERIOD + 1e-9).floor() as usize;
        let ratings = (0..cfg.observers)
            .map(|_| {
                let values = (0..n_ratings)
                    .map(|k| {
                        let t = k as f64 * RATING_PERIOD - cfg.observer_lag;
                        (latent_at(&latent, t) + rng.normal(0.0, cfg.observer_noise)).clamp(-1.0, 1.0)
                    })
                    .collect();
                RatingSeries::new(RATING_PERIOD, values)
            })
            .collect();

        clips.push(NarrativeClip {
            id: format!("clip{idx:03}"),
            target: format!("t{:03}", idx / cfg.clips_per_target),
            duration,
            streams,
            ratings,
        });
    }
    Ok(Corpus {
        meta: CorpusMeta {
            dims: cfg.dims.clone(),
            periods: cfg.periods.clone(),
            rating_period: RATING_PERIOD,
            synthetic: Some(cfg.clone()),
        },
        clips,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClip {
    id: String,
    target: String,
    duration: f64,
    observers: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: CorpusMeta,
    clips: Vec<ManifestClip>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headed numeric CSV whose rows all have `width` fields.
fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let row = rec
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("'{f}': {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for clip in &corpus.clips {
        let dir = root.join(&clip.id);
        let rdir = dir.join("ratings");
        fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
        for (m, s) in &clip.streams {
            let header: Vec<String> = std::iter::once("timestamp".to_string())
                .chain((0..s.dim()).map(|j| format!("f{j}")))
                .collect();
            let rows = (0..s.len()).map(|i| {
                let mut row = vec![s.timestamps()[i]];
                row.extend_from_slice(s.sample(i));
                row
            });
            write_rows(&dir.join(format!("{}.csv", m.file_stem())), &header, rows)?;
        }
        for (j, r) in clip.ratings.iter().enumerate() {
            let header = ["timestamp".to_string(), "value".to_string()];
            let rows = r.values.iter().enumerate().map(|(i, v)| vec![round6(r.timestamp(i)), *v]);
            write_rows(&rdir.join(format!("obs_{j}.csv")), &header, rows)?;
        }
    }
    let manifest = Manifest {
        meta: corpus.meta.clone(),
        clips: corpus
            .clips
            .iter()
            .map(|c| ManifestClip {
                id: c.id.clone(),
                target: c.target.clone(),
                duration: c.duration,
                observers: c.ratings.len(),
            })
            .collect(),
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for mc in &manifest.clips {
        let dir = root.join(&mc.id);
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "{}: clip '{}' listed in the manifest has no directory {}",
                path.display(),
                mc.id,
                dir.display()
            )));
        }
        let mut streams = BTreeMap::new();
        for (&m, &dim) in &manifest.meta.dims {
            let p = dir.join(format!("{}.csv", m.file_stem()));
            let rows = read_rows(&p, dim + 1)?;
            let mut s = ModalityStream::new(m, dim);
            for (i, row) in rows.iter().enumerate() {
                s.push(row[0], &row[1..]).map_err(|e| Error::Parse {
                    path: p.clone(),
                    line: i + 2,
                    msg: e.to_string(),
                })?;
            }
            streams.insert(m, s);
        }
        let mut ratings = Vec::with_capacity(mc.observers);
        for j in 0..mc.observers {
            let p = dir.join("ratings").join(format!("obs_{j}.csv"));
            let rows = read_rows(&p, 2)?;
            for (i, row) in rows.iter().enumerate() {
                if !(-1.0..=1.0).contains(&row[1]) {
                    return Err(Error::Data(format!(
                        "{}:{}: rating {} outside [-1, 1]",
                        p.display(),
                        i + 2,
                        row[1]
                    )));
                }
            }
            ratings.push(RatingSeries::new(
                manifest.meta.rating_period,
                rows.into_iter().map(|r| r[1]).collect(),
            ));
        }
        let clip = NarrativeClip {
            id: mc.id.clone(),
            target: mc.target.clone(),
            duration: mc.duration,
            streams,
            ratings,
        };
        clip.validate()?;
        clips.push(clip);
    }
    Ok(Corpus {
        meta: manifest.meta,
        clips,
    })
}

/// Target-disjoint partition of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Partition::Train),
            "val" | "valid" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            _ => Err(Error::Config(format!("unknown partition '{s}'"))),
        }
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

impl Split {
    pub fn targets(&self, p: Partition) -> &[String] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn partition_of(&self, target: &str) -> Option<Partition> {
        [Partition::Train, Partition::Val, Partition::Test]
            .into_iter()
            .find(|&p| self.targets(p).iter().any(|t| t == target))
    }

    /// Clips of `corpus` whose target falls in `p`, in corpus order.
    pub fn clips<'a>(&self, corpus: &'a Corpus, p: Partition) -> Vec<&'a NarrativeClip> {
        let set: BTreeSet<&str> = self.targets(p).iter().map(String::as_str).collect();
        corpus.clips.iter().filter(|c| set.contains(c.target.as_str())).collect()
    }

    /// Fails unless the three target sets are pairwise disjoint.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for p in [Partition::Train, Partition::Val, Partition::Test] {
            for t in self.targets(p) {
                if let Some(prev) = seen.insert(t.as_str(), p) {
                    return Err(Error::Data(format!("target {t} appears in both {prev} and {p}")));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Split = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        s.check_disjoint()?;
        Ok(s)
    }
}

/// Shuffles the distinct targets by `seed` and deals them into
/// train/val/test; validation and test sizes are `round(ratio · n)`.
pub fn split_by_target(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let mut targets: Vec<String> = corpus.targets().into_iter().map(String::from).collect();
    let n = targets.len();
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 targets to split, found {n}")));
    }
    let total: f64 = ratios.iter().sum();
    let n_val = ((ratios[1] / total * n as f64).round() as usize).max(1);
    let n_test = ((ratios[2] / total * n as f64).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::Data(format!("{n} targets leave no training partition at ratios {ratios:?}")));
    }
    let mut rng = RngState::new(seed);
    rng.shuffle(&mut targets);
    let test = targets.split_off(n - n_test);
    let val = targets.split_off(n - n_test - n_val);
    let split = Split {
        seed,
        ratios,
        train: targets,
        val,
        test,
    };
    split.check_disjoint()?;
    Ok(split)
}
