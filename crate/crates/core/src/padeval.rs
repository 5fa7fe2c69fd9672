//! Presentation-attack metrics (APCER, BPCER, D-EER), DET curves and the
//! intra / inter / both evaluation protocols.
//!
//! A sample is classified as an attack iff its score is at least the
//! threshold. Rates are percentages in `[0, 100]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloudio::{ClassLabel, PointCloud};
use crate::{Error, Result};

pub const DET_CSV_HEADER: &str = "threshold,apcer,bpcer";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub score: f64,
    pub label: ClassLabel,
    pub identity: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self> {
        let mut set = Self::default();
        for e in entries {
            set.push(e)?;
        }
        Ok(set)
    }

    /// Builds a set from bare attack and bona fide scores.
    pub fn from_scores(attack: &[f64], bona_fide: &[f64]) -> Result<Self> {
        let mut set = Self::default();
        for (i, &s) in attack.iter().enumerate() {
            set.push(ScoreEntry {
                score: s,
                label: ClassLabel::SiliconeMask,
                identity: format!("a{i}"),
            })?;
        }
        for (i, &s) in bona_fide.iter().enumerate() {
            set.push(ScoreEntry {
                score: s,
                label: ClassLabel::BonaFide,
                identity: format!("b{i}"),
            })?;
        }
        Ok(set)
    }

    pub fn push(&mut self, entry: ScoreEntry) -> Result<()> {
        if !(0.0..=1.0).contains(&entry.score) {
            return Err(Error::InvalidScores(format!(
                "score {} of {} is outside [0, 1]",
                entry.score, entry.identity
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn sorted(&self) -> Result<Sorted> {
        let mut attack = Vec::new();
        let mut bona = Vec::new();
        for e in &self.entries {
            if e.label.is_attack() {
                attack.push(e.score);
            } else {
                bona.push(e.score);
            }
        }
        if attack.is_empty() {
            return Err(Error::EmptyClass("attack"));
        }
        if bona.is_empty() {
            return Err(Error::EmptyClass("bona fide"));
        }
        attack.sort_by(f64::total_cmp);
        bona.sort_by(f64::total_cmp);
        Ok(Sorted { attack, bona })
    }
}

struct Sorted {
    attack: Vec<f64>,
    bona: Vec<f64>,
}

impl Sorted {
    fn rates(&self, threshold: f64) -> (f64, f64) {
        let missed = self.attack.partition_point(|&s| s < threshold);
        let false_alarms = self.bona.len() - self.bona.partition_point(|&s| s < threshold);
        (
            percent(missed, self.attack.len()),
            percent(false_alarms, self.bona.len()),
        )
    }

    /// 0, every distinct score, and the next value above the maximum.
    fn thresholds(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.attack.iter().chain(&self.bona).copied().collect();
        t.push(0.0);
        t.sort_by(f64::total_cmp);
        t.dedup();
        let top = *t.last().expect("non-empty");
        t.push(top.next_up());
        t
    }

    fn sweep(&self) -> Vec<DetPoint> {
        self.thresholds()
            .into_iter()
            .map(|threshold| {
                let (apcer, bpcer) = self.rates(threshold);
                DetPoint {
                    threshold,
                    apcer,
                    bpcer,
                }
            })
            .collect()
    }
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

/// `(APCER, BPCER)` at `threshold`.
pub fn error_rates(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    Ok(scores.sorted()?.rates(threshold))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EqualErrorRate {
    /// Mean of APCER and BPCER at the chosen threshold.
    pub eer: f64,
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// Operating point minimizing `|APCER - BPCER|`, lowest threshold on ties.
pub fn d_eer(scores: &ScoreSet) -> Result<EqualErrorRate> {
    Ok(eer_from_curve(&scores.sorted()?.sweep()))
}

fn eer_from_curve(curve: &[DetPoint]) -> EqualErrorRate {
    let mut best = curve[0];
    for p in &curve[1..] {
        if (p.apcer - p.bpcer).abs() < (best.apcer - best.bpcer).abs() {
            best = *p;
        }
    }
    EqualErrorRate {
        eer: (best.apcer + best.bpcer) / 2.0,
        threshold: best.threshold,
        apcer: best.apcer,
        bpcer: best.bpcer,
    }
}

/// Lowest BPCER over thresholds whose APCER does not exceed `target_apcer`.
pub fn bpcer_at_apcer(scores: &ScoreSet, target_apcer: f64) -> Result<f64> {
    check_target(target_apcer)?;
    Ok(bpcer_from_curve(&scores.sorted()?.sweep(), target_apcer))
}

fn check_target(target: f64) -> Result<()> {
    if target > 0.0 && target <= 100.0 {
        Ok(())
    } else {
        Err(Error::InvalidScores(format!(
            "APCER target {target} must lie in (0, 100]"
        )))
    }
}

fn bpcer_from_curve(curve: &[DetPoint], target: f64) -> f64 {
    // Threshold 0 has APCER 0, so at least one point always qualifies.
    curve
        .iter()
        .filter(|p| p.apcer <= target)
        .map(|p| p.bpcer)
        .fold(f64::INFINITY, f64::min)
}

/// Operating points at every candidate threshold, in ascending threshold order.
pub fn det_curve(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    Ok(scores.sorted()?.sweep())
}

pub fn det_csv(curve: &[DetPoint]) -> String {
    let mut out = String::from(DET_CSV_HEADER);
    out.push('\n');
    for p in curve {
        let _ = writeln!(out, "{},{:.4},{:.4}", p.threshold, p.apcer, p.bpcer);
    }
    out
}

/// Parses a DET CSV back into points, rejecting malformed rows.
pub fn parse_det_csv(text: &str) -> Result<Vec<DetPoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DET_CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {DET_CSV_HEADER:?}"),
            })
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let [threshold, apcer, bpcer] = vals[..] else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 fields, found {}", vals.len()),
            });
        };
        if ![apcer, bpcer].iter().all(|r| (0.0..=100.0).contains(r)) {
            return Err(Error::Parse {
                line: i + 1,
                msg: "rates must lie in [0, 100]".into(),
            });
        }
        points.push(DetPoint {
            threshold,
            apcer,
            bpcer,
        });
    }
    if points.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no operating points".into(),
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub d_eer: f64,
    pub threshold_at_eer: f64,
    pub bpcer_at_apcer_10: f64,
    pub bpcer_at_apcer_5: f64,
    pub det_points: Vec<DetPoint>,
}

pub fn evaluate(scores: &ScoreSet) -> Result<EvalReport> {
    let curve = scores.sorted()?.sweep();
    let eer = eer_from_curve(&curve);
    Ok(EvalReport {
        d_eer: eer.eer,
        threshold_at_eer: eer.threshold,
        bpcer_at_apcer_10: bpcer_from_curve(&curve, 10.0),
        bpcer_at_apcer_5: bpcer_from_curve(&curve, 5.0),
        det_points: curve,
    })
}

impl EvalReport {
    pub fn row(&self) -> ReportRow {
        ReportRow {
            d_eer: self.d_eer,
            bpcer_at_apcer_10: self.bpcer_at_apcer_10,
            bpcer_at_apcer_5: self.bpcer_at_apcer_5,
        }
    }
}

/// One line of a results table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub d_eer: f64,
    pub bpcer_at_apcer_10: f64,
    pub bpcer_at_apcer_5: f64,
}

/// Results table with columns D-EER, BPCER @ APCER = 10% and 5%.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<(String, ReportRow)>,
}

impl ReportTable {
    pub fn push(&mut self, name: impl Into<String>, row: ReportRow) {
        self.rows.push((name.into(), row));
    }
}

impl fmt::Display for ReportTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|(n, _)| n.len())
            .chain(["protocol".len()])
            .max()
            .unwrap_or(8);
        writeln!(
            f,
            "{:<width$} | {:>9} | {:>16} | {:>15}",
            "protocol", "D-EER (%)", "BPCER@APCER=10%", "BPCER@APCER=5%"
        )?;
        for (name, r) in &self.rows {
            writeln!(
                f,
                "{:<width$} | {:>9.2} | {:>16.2} | {:>15.2}",
                name, r.d_eer, r.bpcer_at_apcer_10, r.bpcer_at_apcer_5
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    Intra,
    Inter,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub mode: ProtocolMode,
    pub train_pai: Vec<ClassLabel>,
    pub test_pai: Vec<ClassLabel>,
}

impl ProtocolSpec {
    pub fn intra(pai: ClassLabel) -> Self {
        Self {
            mode: ProtocolMode::Intra,
            train_pai: vec![pai],
            test_pai: vec![pai],
        }
    }

    pub fn inter(train: ClassLabel, test: ClassLabel) -> Self {
        Self {
            mode: ProtocolMode::Inter,
            train_pai: vec![train],
            test_pai: vec![test],
        }
    }

    pub fn both() -> Self {
        let pais = vec![ClassLabel::SiliconeMask, ClassLabel::WrapPhoto];
        Self {
            mode: ProtocolMode::Both,
            train_pai: pais.clone(),
            test_pai: pais,
        }
    }

    /// Short name such as `intra-silicone_mask` or `inter-silicone_mask-wrap_photo`.
    pub fn name(&self) -> String {
        match self.mode {
            ProtocolMode::Intra => format!("intra-{}", self.train_pai[0]),
            ProtocolMode::Inter => format!("inter-{}-{}", self.train_pai[0], self.test_pai[0]),
            ProtocolMode::Both => "both".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let set = |v: &[ClassLabel]| -> Result<BTreeSet<&'static str>> {
            let mut s = BTreeSet::new();
            for l in v {
                if !l.is_attack() {
                    return Err(Error::InvalidConfig(format!(
                        "protocol PAI lists may only contain attack classes, found {l}"
                    )));
                }
                if !s.insert(l.as_str()) {
                    return Err(Error::InvalidConfig(format!("protocol PAI {l} listed twice")));
                }
            }
            Ok(s)
        };
        let train = set(&self.train_pai)?;
        let test = set(&self.test_pai)?;
        let ok = match self.mode {
            ProtocolMode::Intra => train.len() == 1 && train == test,
            ProtocolMode::Inter => {
                !train.is_empty() && !test.is_empty() && train.is_disjoint(&test)
            }
            ProtocolMode::Both => train.len() == 2 && test.len() == 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "train_pai {:?} / test_pai {:?} do not fit protocol mode {:?}",
                train, test, self.mode
            )))
        }
    }
}

/// Anything carrying a class label and an identity tag.
pub trait Labeled {
    fn label(&self) -> ClassLabel;
    fn identity(&self) -> &str;
}

impl Labeled for PointCloud {
    fn label(&self) -> ClassLabel {
        self.label
    }
    fn identity(&self) -> &str {
        &self.identity
    }
}

impl<T: Labeled> Labeled for &T {
    fn label(&self) -> ClassLabel {
        (*self).label()
    }
    fn identity(&self) -> &str {
        (*self).identity()
    }
}

/// Sample indices assigned to each side of a protocol split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Number of bona fide identities placed in the training set.
pub fn bona_fide_train_count(identities: usize) -> usize {
    ((2 * identities) as f64 / 3.0).round() as usize
}

/// Number of identities of a shared PAI placed in the training set.
pub fn attack_train_count(identities: usize) -> usize {
    identities.div_ceil(2)
}

/// Assigns samples to train and test by identity. Samples of PAIs the
/// protocol does not use are left out.
pub fn split_indices<T: Labeled>(
    samples: &[T],
    spec: &ProtocolSpec,
    seed: u64,
) -> Result<SplitIndices> {
    spec.validate()?;
    let mut by_class: BTreeMap<ClassLabel, BTreeSet<&str>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.label()).or_default().insert(s.identity());
    }
    let ids = |c: ClassLabel| -> Vec<&str> {
        by_class
            .get(&c)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    };
    let need = |c: ClassLabel, needed: usize, have: usize| -> Result<()> {
        if have < needed {
            Err(Error::InsufficientIdentities {
                class: c.to_string(),
                needed,
                have,
            })
        } else {
            Ok(())
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_ids: BTreeSet<(ClassLabel, &str)> = BTreeSet::new();
    let mut test_ids: BTreeSet<(ClassLabel, &str)> = BTreeSet::new();
    let mut split_class = |c: ClassLabel, n_train: fn(usize) -> usize| -> Result<()> {
        let mut v = ids(c);
        need(c, 2, v.len())?;
        v.shuffle(&mut rng);
        let k = n_train(v.len()).clamp(1, v.len() - 1);
        train_ids.extend(v[..k].iter().map(|&i| (c, i)));
        test_ids.extend(v[k..].iter().map(|&i| (c, i)));
        Ok(())
    };

    split_class(ClassLabel::BonaFide, bona_fide_train_count)?;
    match spec.mode {
        ProtocolMode::Intra | ProtocolMode::Both => {
            for &pai in &spec.train_pai {
                split_class(pai, attack_train_count)?;
            }
        }
        ProtocolMode::Inter => {
            for (pais, side) in [(&spec.train_pai, &mut train_ids), (&spec.test_pai, &mut test_ids)] {
                for &pai in pais {
                    let v = ids(pai);
                    need(pai, 1, v.len())?;
                    side.extend(v.into_iter().map(|i| (pai, i)));
                }
            }
        }
    }

    let mut out = SplitIndices::default();
    for (i, s) in samples.iter().enumerate() {
        let key = (s.label(), s.identity());
        if train_ids.contains(&key) {
            out.train.push(i);
        } else if test_ids.contains(&key) {
            out.test.push(i);
        }
    }
    Ok(out)
}

/// Identity-disjoint train and test sets for `spec`.
pub fn split_protocol<T: Labeled + Clone>(
    samples: &[T],
    spec: &ProtocolSpec,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let idx = split_indices(samples, spec, seed)?;
    let pick = |v: &[usize]| v.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&idx.train), pick(&idx.test)))
}
