//! Scene memory bank with exact nearest-neighbour queries and the
//! neighbour-sourced `do(.)` intervention.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, FieldError, Result};
use crate::intervention::CausalSplit;
use crate::nn::{dot, l2_norm, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    L2,
}

/// Bank maintenance policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Populated once, then frozen.
    #[serde(rename = "F1")]
    F1Static,
    /// Rebuilt every batch from a sliding window of recent batches.
    #[serde(rename = "F2")]
    F2Dynamic,
    /// As F2, plus each batch's mixed-up video rows.
    #[serde(rename = "F3")]
    F3DynamicMixup,
}

/// Which partition a `do(.)` replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Causal,
    Complement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnseConfig {
    pub regime: Regime,
    pub metric: Metric,
    pub k: usize,
    #[serde(rename = "window_W")]
    pub window: usize,
    pub exclude_self: bool,
}

impl Default for MnseConfig {
    fn default() -> Self {
        Self {
            regime: Regime::F2Dynamic,
            metric: Metric::Cosine,
            k: 3,
            window: 8,
            exclude_self: true,
        }
    }
}

impl MnseConfig {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.k == 0 {
            errs.push(FieldError::new(format!("{prefix}.k"), "must be at least 1"));
        }
        if self.window == 0 {
            errs.push(FieldError::new(format!("{prefix}.window_W"), "must be at least 1"));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub vector: Vec<f64>,
    pub video_id: String,
    pub clip_index: usize,
}

impl BankEntry {
    pub fn new(vector: Vec<f64>, video_id: impl Into<String>, clip_index: usize) -> Self {
        Self {
            vector,
            video_id: video_id.into(),
            clip_index,
        }
    }
}

/// One query against the bank.
#[derive(Debug, Clone, Copy)]
pub struct NeighborQuery<'a> {
    pub vector: &'a [f64],
    pub k: usize,
    pub exclude_video_id: Option<&'a str>,
}

/// A ranked hit. `score` is the cosine similarity or the squared L2
/// distance, depending on the bank metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    dim: usize,
    metric: Metric,
    regime: Regime,
    window: usize,
    frozen: bool,
    entries: Vec<BankEntry>,
    norms: Vec<f64>,
    history: VecDeque<Vec<BankEntry>>,
}

impl MemoryBank {
    pub fn new(dim: usize, metric: Metric, regime: Regime, window: usize) -> Self {
        Self {
            dim,
            metric,
            regime,
            window: window.max(1),
            frozen: false,
            entries: Vec::new(),
            norms: Vec::new(),
            history: VecDeque::new(),
        }
    }

    pub fn from_config(dim: usize, cfg: &MnseConfig) -> Self {
        Self::new(dim, cfg.metric, cfg.regime, cfg.window)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &BankEntry {
        &self.entries[index]
    }

    fn check(&self, e: &BankEntry) -> Result<()> {
        if e.vector.len() != self.dim {
            return Err(Error::dim("bank entry", self.dim, e.vector.len()));
        }
        crate::error::check_finite("bank entry", &e.vector)
    }

    fn push_unchecked(&mut self, e: BankEntry) {
        self.norms.push(l2_norm(&e.vector));
        self.entries.push(e);
    }

    pub fn populate(&mut self, scenes: impl IntoIterator<Item = BankEntry>) -> Result<()> {
        if self.frozen {
            return Err(Error::Regime("populate called on a frozen F1 bank".into()));
        }
        let scenes: Vec<BankEntry> = scenes.into_iter().collect();
        for e in &scenes {
            self.check(e)?;
        }
        for e in scenes {
            self.push_unchecked(e);
        }
        Ok(())
    }

    /// Every clip row of every video.
    pub fn populate_videos<'a>(&mut self, videos: impl IntoIterator<Item = (&'a Tensor2, &'a str)>) -> Result<()> {
        let mut scenes = Vec::new();
        for (video, id) in videos {
            for (c, row) in video.iter_rows().enumerate() {
                scenes.push(BankEntry::new(row.to_vec(), id, c));
            }
        }
        self.populate(scenes)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.norms.clear();
    }

    /// Per-batch refresh. F1 ignores the call; F2 keeps the last `window`
    /// batches; F3 additionally stores `mixup_rows`.
    pub fn advance_batch(&mut self, batch: Vec<BankEntry>, mixup_rows: Vec<BankEntry>) -> Result<()> {
        let mut item = batch;
        match self.regime {
            Regime::F1Static => return Ok(()),
            Regime::F2Dynamic => {}
            Regime::F3DynamicMixup => item.extend(mixup_rows),
        }
        for e in &item {
            self.check(e)?;
        }
        self.history.push_back(item);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        self.clear();
        let all: Vec<BankEntry> = self.history.iter().flatten().cloned().collect();
        for e in all {
            self.push_unchecked(e);
        }
        Ok(())
    }

    fn key(&self, index: usize, query: &[f64], query_norm: f64) -> f64 {
        let e = &self.entries[index].vector;
        match self.metric {
            Metric::Cosine => {
                let denom = query_norm * self.norms[index];
                if denom == 0.0 {
                    0.0
                } else {
                    (dot(query, e) / denom).clamp(-1.0, 1.0)
                }
            }
            Metric::L2 => query.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum(),
        }
    }

    fn compare(&self, a: &Neighbor, b: &Neighbor) -> Ordering {
        let primary = match self.metric {
            Metric::Cosine => b.score.total_cmp(&a.score),
            Metric::L2 => a.score.total_cmp(&b.score),
        };
        primary.then_with(|| {
            let (ea, eb) = (&self.entries[a.index], &self.entries[b.index]);
            (&ea.video_id, ea.clip_index).cmp(&(&eb.video_id, eb.clip_index))
        })
    }

    fn eligible(&self, exclude: Option<&str>) -> impl Iterator<Item = usize> + '_ {
        let exclude = exclude.map(str::to_owned);
        (0..self.entries.len()).filter(move |&i| exclude.as_deref() != Some(self.entries[i].video_id.as_str()))
    }

    /// Exact top-k by scanning every eligible entry.
    pub fn query_knn(&self, q: &NeighborQuery) -> Result<Vec<Neighbor>> {
        if q.vector.len() != self.dim {
            return Err(Error::dim("neighbor query", self.dim, q.vector.len()));
        }
        crate::error::check_finite("neighbor query", q.vector)?;
        if q.k == 0 {
            return Err(Error::Invalid("neighbor query k must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        let qn = l2_norm(q.vector);
        let mut hits: Vec<Neighbor> = self
            .eligible(q.exclude_video_id)
            .map(|index| Neighbor {
                index,
                score: self.key(index, q.vector, qn),
            })
            .collect();
        if hits.len() < q.k {
            return Err(Error::InsufficientEntries {
                requested: q.k,
                available: hits.len(),
            });
        }
        if hits.len() > q.k {
            hits.select_nth_unstable_by(q.k - 1, |a, b| self.compare(a, b));
            hits.truncate(q.k);
        }
        hits.sort_by(|a, b| self.compare(a, b));
        Ok(hits)
    }

    /// Uniform choice among the top-k neighbours.
    pub fn sample_neighbor_scene<R: Rng + ?Sized>(&self, q: &NeighborQuery, rng: &mut R) -> Result<&BankEntry> {
        let hits = self.query_knn(q)?;
        let pick = if hits.len() == 1 { 0 } else { rng.random_range(0..hits.len()) };
        Ok(&self.entries[hits[pick].index])
    }

    /// Uniform choice among all eligible entries.
    pub fn sample_random_scene<R: Rng + ?Sized>(&self, exclude: Option<&str>, rng: &mut R) -> Result<&BankEntry> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        let n_excluded = match exclude {
            Some(id) => self.entries.iter().filter(|e| e.video_id == id).count(),
            None => 0,
        };
        let available = self.entries.len() - n_excluded;
        if available == 0 {
            return Err(Error::InsufficientEntries { requested: 1, available });
        }
        let nth = rng.random_range(0..available);
        let index = self.eligible(exclude).nth(nth).expect("counted above");
        Ok(&self.entries[index])
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let payload = "bank.f32".to_string();
        binio::ensure_parent(manifest_path)?;
        binio::write_f32_le(
            &binio::sibling(manifest_path, &payload),
            self.entries.iter().flat_map(|e| e.vector.iter().copied()),
        )?;
        let manifest = BankManifest {
            version: 1,
            dim: self.dim,
            count: self.entries.len(),
            metric: self.metric,
            regime: self.regime,
            window: self.window,
            frozen: self.frozen,
            dtype: "f32".into(),
            endianness: "little".into(),
            payload,
            video_ids: self.entries.iter().map(|e| e.video_id.clone()).collect(),
            clip_indices: self.entries.iter().map(|e| e.clip_index).collect(),
        };
        binio::write_json(manifest_path, &manifest)
    }

    /// Restores a snapshot. Only the current entries are stored, so a
    /// restored F2/F3 bank starts with an empty batch history.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m: BankManifest = binio::read_json(manifest_path)?;
        if m.video_ids.len() != m.count || m.clip_indices.len() != m.count {
            return Err(Error::dim("bank snapshot id count", m.count, m.video_ids.len()));
        }
        let data = binio::read_f32_le(&binio::sibling(manifest_path, &m.payload), m.count * m.dim)?;
        let mut bank = Self::new(m.dim, m.metric, m.regime, m.window);
        let entries = m
            .video_ids
            .into_iter()
            .zip(m.clip_indices)
            .enumerate()
            .map(|(i, (id, c))| BankEntry::new(data[i * m.dim..(i + 1) * m.dim].to_vec(), id, c));
        bank.populate(entries)?;
        bank.frozen = m.frozen;
        Ok(bank)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    version: u32,
    dim: usize,
    count: usize,
    metric: Metric,
    regime: Regime,
    window: usize,
    frozen: bool,
    dtype: String,
    endianness: String,
    payload: String,
    video_ids: Vec<String>,
    clip_indices: Vec<usize>,
}

fn target_rows(split: &CausalSplit, target: Target) -> Vec<usize> {
    split
        .mask
        .iter()
        .enumerate()
        .filter(|&(_, &causal)| causal == (target == Target::Causal))
        .map(|(i, _)| i)
        .collect()
}

fn check_split(video: &Tensor2, split: &CausalSplit) -> Result<()> {
    if split.mask.len() != video.rows() {
        return Err(Error::dim("split mask", video.rows(), split.mask.len()));
    }
    Ok(())
}

/// Replaces each row of the target partition with a scene sampled among
/// its own `k` nearest neighbours. Other rows are copied unchanged.
pub fn mnse_do<R: Rng + ?Sized>(
    video: &Tensor2,
    split: &CausalSplit,
    bank: &MemoryBank,
    target: Target,
    k: usize,
    exclude_video_id: Option<&str>,
    rng: &mut R,
) -> Result<Tensor2> {
    check_split(video, split)?;
    let mut out = video.clone();
    for r in target_rows(split, target) {
        let q = NeighborQuery {
            vector: video.row(r),
            k,
            exclude_video_id,
        };
        let scene = bank.sample_neighbor_scene(&q, rng)?;
        out.row_mut(r).copy_from_slice(&scene.vector);
    }
    Ok(out)
}

/// Same contract as [`mnse_do`] with uniformly random bank scenes.
pub fn random_do<R: Rng + ?Sized>(
    video: &Tensor2,
    split: &CausalSplit,
    bank: &MemoryBank,
    target: Target,
    exclude_video_id: Option<&str>,
    rng: &mut R,
) -> Result<Tensor2> {
    check_split(video, split)?;
    if bank.dim() != video.cols() {
        return Err(Error::dim("bank dim", video.cols(), bank.dim()));
    }
    let mut out = video.clone();
    for r in target_rows(split, target) {
        let scene = bank.sample_random_scene(exclude_video_id, rng)?;
        out.row_mut(r).copy_from_slice(&scene.vector);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_bank(n: usize, dim: usize, metric: Metric, seed: u64) -> MemoryBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = MemoryBank::new(dim, metric, Regime::F1Static, 1);
        bank.populate((0..n).map(|i| {
            BankEntry::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), format!("v{}", i / 4), i % 4)
        }))
        .unwrap();
        bank
    }

    #[test]
    fn populate_grows_and_f1_freeze_blocks() {
        let mut bank = random_bank(100, 8, Metric::Cosine, 0);
        assert_eq!(bank.len(), 100);
        bank.freeze();
        let err = bank.populate([BankEntry::new(vec![0.0; 8], "x", 0)]).unwrap_err();
        assert!(matches!(err, Error::Regime(_)));
        bank.advance_batch(vec![BankEntry::new(vec![0.0; 8], "x", 0)], vec![]).unwrap();
        assert_eq!(bank.len(), 100);
    }

    #[test]
    fn wrong_dim_rejected() {
        let mut bank = MemoryBank::new(4, Metric::Cosine, Regime::F2Dynamic, 2);
        assert!(matches!(
            bank.populate([BankEntry::new(vec![0.0; 3], "x", 0)]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn stored_query_ranks_first() {
        let bank = random_bank(50, 6, Metric::Cosine, 1);
        let v = bank.entry(17).vector.clone();
        let hits = bank.query_knn(&NeighborQuery { vector: &v, k: 3, exclude_video_id: None }).unwrap();
        assert_eq!(hits[0].index, 17);
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        let l2 = random_bank(50, 6, Metric::L2, 1);
        let hits = l2.query_knn(&NeighborQuery { vector: &v, k: 1, exclude_video_id: None }).unwrap();
        assert_eq!((hits[0].index, hits[0].score), (17, 0.0));
    }

    #[test]
    fn ties_break_by_video_then_clip() {
        let mut bank = MemoryBank::new(2, Metric::Cosine, Regime::F1Static, 1);
        bank.populate([
            BankEntry::new(vec![2.0, 0.0], "b", 0),
            BankEntry::new(vec![1.0, 0.0], "a", 3),
            BankEntry::new(vec![3.0, 0.0], "a", 1),
        ])
        .unwrap();
        let hits = bank.query_knn(&NeighborQuery { vector: &[1.0, 0.0], k: 3, exclude_video_id: None }).unwrap();
        let order: Vec<usize> = hits.iter().map(|h| h.index).collect();
        assert_eq!(order, vec![2, 1, 0]);
    }

    #[test]
    fn exclusion() {
        let bank = random_bank(8, 3, Metric::Cosine, 2);
        let q = bank.entry(0).vector.clone();
        let hits = bank.query_knn(&NeighborQuery { vector: &q, k: 4, exclude_video_id: Some("v0") }).unwrap();
        assert!(hits.iter().all(|h| bank.entry(h.index).video_id != "v0"));
        let mut one = MemoryBank::new(3, Metric::Cosine, Regime::F1Static, 1);
        one.populate([BankEntry::new(vec![1.0; 3], "only", 0)]).unwrap();
        assert!(matches!(
            one.query_knn(&NeighborQuery { vector: &q, k: 1, exclude_video_id: Some("only") }),
            Err(Error::InsufficientEntries { requested: 1, available: 0 })
        ));
        assert!(one.sample_random_scene(Some("only"), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let empty = MemoryBank::new(3, Metric::Cosine, Regime::F1Static, 1);
        assert!(matches!(
            empty.query_knn(&NeighborQuery { vector: &q, k: 1, exclude_video_id: None }),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn f2_window_and_f3_mixup_rows() {
        let row = |v: f64, id: &str| BankEntry::new(vec![v, 1.0], id, 0);
        let mut f2 = MemoryBank::new(2, Metric::Cosine, Regime::F2Dynamic, 2);
        for t in 0..5 {
            f2.advance_batch(vec![row(t as f64, &format!("b{t}"))], vec![row(-1.0, "mix")]).unwrap();
        }
        let ids: Vec<&str> = f2.entries().iter().map(|e| e.video_id.as_str()).collect();
        assert_eq!(ids, vec!["b3", "b4"]);
        let mut f3 = MemoryBank::new(2, Metric::Cosine, Regime::F3DynamicMixup, 1);
        f3.advance_batch(vec![row(0.5, "b")], vec![row(0.25, "mix")]).unwrap();
        assert_eq!(f3.len(), 2);
        assert_eq!(f3.entry(1).vector, vec![0.25, 1.0]);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = random_bank(12, 5, Metric::L2, 3);
        for e in &mut bank.entries {
            e.vector.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        bank.freeze();
        let path = dir.path().join("bank.json");
        bank.save(&path).unwrap();
        let back = MemoryBank::load(&path).unwrap();
        assert_eq!(back.entries(), bank.entries());
        assert!(back.is_frozen());
        assert_eq!(back.metric(), Metric::L2);
    }

    #[test]
    fn do_operators_respect_partition() {
        let bank = random_bank(40, 4, Metric::Cosine, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let video = Tensor2::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let split = CausalSplit::from_mask(vec![true, false, true]);
        let out = mnse_do(&video, &split, &bank, Target::Complement, 3, None, &mut rng).unwrap();
        assert_eq!(out.row(0), video.row(0));
        assert_eq!(out.row(2), video.row(2));
        assert_ne!(out.row(1), video.row(1));
        let all = CausalSplit::from_mask(vec![true; 3]);
        assert_eq!(random_do(&video, &all, &bank, Target::Complement, None, &mut rng).unwrap(), video);
    }

    #[test]
    fn own_rows_in_bank_make_do_identity() {
        let video = Tensor2::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.2, -0.1]]).unwrap();
        let mut bank = MemoryBank::new(2, Metric::L2, Regime::F1Static, 1);
        bank.populate_videos([(&video, "self")]).unwrap();
        bank.populate([BankEntry::new(vec![9.0, 9.0], "other", 0)]).unwrap();
        let split = CausalSplit::from_mask(vec![false; 3]);
        let out = mnse_do(&video, &split, &bank, Target::Complement, 1, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, video);
    }
}
