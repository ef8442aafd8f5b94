//! Retrieval metrics with camera exclusion, two-stream score fusion and
//! report output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{PixelNorm, ReidDataset};
use crate::matching::ScoreMatrix;
use crate::model::{Stream, TalModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Standardize each stream over the whole matrix, then add.
    Sum,
    /// Add the raw scores.
    RawSum,
    Ds,
    Di,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Sum => "sum",
            FusionMode::RawSum => "raw-sum",
            FusionMode::Ds => "ds",
            FusionMode::Di => "di",
        }
    }
}

/// Zero mean, unit variance over all entries; a constant matrix maps to 0.
pub fn standardize(m: &ScoreMatrix) -> ScoreMatrix {
    let n = m.values.len().max(1) as f64;
    let mean = m.values.iter().sum::<f64>() / n;
    let var = m.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let values = m
        .values
        .iter()
        .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
        .collect();
    ScoreMatrix {
        rows: m.rows,
        cols: m.cols,
        values,
    }
}

pub fn fuse_scores(ds: &ScoreMatrix, di: &ScoreMatrix, mode: FusionMode) -> Result<ScoreMatrix> {
    if (ds.rows, ds.cols) != (di.rows, di.cols) {
        return Err(Error::Shape(format!(
            "cannot fuse {}x{} with {}x{} scores",
            ds.rows, ds.cols, di.rows, di.cols
        )));
    }
    let add = |a: &ScoreMatrix, b: &ScoreMatrix| ScoreMatrix {
        rows: a.rows,
        cols: a.cols,
        values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
    };
    Ok(match mode {
        FusionMode::Sum => add(&standardize(ds), &standardize(di)),
        FusionMode::RawSum => add(ds, di),
        FusionMode::Ds => ds.clone(),
        FusionMode::Di => di.clone(),
    })
}

/// Identity and camera of every query and gallery entry.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalLabels<'a> {
    pub query_ids: &'a [i64],
    pub gallery_ids: &'a [i64],
    pub query_cams: &'a [u32],
    pub gallery_cams: &'a [u32],
}

impl RetrievalLabels<'_> {
    fn check(&self, scores: &ScoreMatrix) -> Result<()> {
        if self.query_ids.len() != scores.rows
            || self.query_cams.len() != scores.rows
            || self.gallery_ids.len() != scores.cols
            || self.gallery_cams.len() != scores.cols
        {
            return Err(Error::Shape(format!(
                "labels do not cover the {}x{} score matrix",
                scores.rows, scores.cols
            )));
        }
        Ok(())
    }

    fn excluded(&self, q: usize, g: usize) -> bool {
        self.query_ids[q] == self.gallery_ids[g] && self.query_cams[q] == self.gallery_cams[g]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: usize,
    /// Gallery indices left after exclusion, best first.
    pub gallery: Vec<usize>,
    pub scores: Vec<f64>,
    /// `None` for queries without a valid positive.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
    pub map: f64,
    /// `cmc[k]` is the fraction of evaluated queries with a positive within
    /// the top `k + 1`.
    pub cmc: Vec<f64>,
    pub evaluated: usize,
    /// Queries without any valid positive.
    pub skipped: Vec<usize>,
}

impl RankingResult {
    /// CMC at a 1-based rank, saturating at the end of the curve.
    pub fn top(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }
}

/// Valid gallery entries of one query, sorted by score descending with ties
/// going to the lower gallery index.
fn rank_query(scores: &ScoreMatrix, labels: &RetrievalLabels<'_>, q: usize) -> Vec<usize> {
    let row = scores.row(q);
    let mut order: Vec<usize> = (0..scores.cols).filter(|&g| !labels.excluded(q, g)).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// Double-double accumulator: fractions and their sums keep ~32 digits and
/// round to `f64` once, so small rational APs come out correctly rounded.
#[derive(Debug, Clone, Copy, Default)]
struct Exact {
    hi: f64,
    lo: f64,
}

impl Exact {
    fn normalized(a: f64, b: f64) -> Self {
        let hi = a + b;
        Self { hi, lo: b - (hi - a) }
    }

    fn ratio(n: f64, d: f64) -> Self {
        let q = n / d;
        Self::normalized(q, (-q).mul_add(d, n) / d)
    }

    fn add(self, o: Self) -> Self {
        let s = self.hi + o.hi;
        let v = s - self.hi;
        let e = (self.hi - (s - v)) + (o.hi - v);
        Self::normalized(s, e + self.lo + o.lo)
    }

    fn div(self, d: f64) -> Self {
        let q = self.hi / d;
        let r = (-q).mul_add(d, self.hi) + self.lo;
        Self::normalized(q, r / d)
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

fn precision_sum(relevant: &[bool]) -> Option<Exact> {
    let mut hits = 0usize;
    let mut sum = Exact::default();
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum = sum.add(Exact::ratio(hits as f64, (i + 1) as f64));
        }
    }
    (hits > 0).then(|| sum.div(hits as f64))
}

pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    precision_sum(relevant).map(Exact::value)
}

pub fn compute_map_cmc(scores: &ScoreMatrix, labels: &RetrievalLabels<'_>) -> Result<RankingResult> {
    labels.check(scores)?;
    let mut queries = Vec::with_capacity(scores.rows);
    let mut first_hit = vec![0usize; scores.cols];
    let mut skipped = Vec::new();
    let mut ap_sum = Exact::default();
    for q in 0..scores.rows {
        let order = rank_query(scores, labels, q);
        let relevant: Vec<bool> = order
            .iter()
            .map(|&g| labels.gallery_ids[g] == labels.query_ids[q])
            .collect();
        let exact = precision_sum(&relevant);
        let ap = exact.map(Exact::value);
        match exact {
            Some(e) => {
                ap_sum = ap_sum.add(e);
                first_hit[relevant.iter().position(|&r| r).unwrap()] += 1;
            }
            None => skipped.push(q),
        }
        let row = scores.row(q);
        queries.push(QueryRanking {
            query: q,
            scores: order.iter().map(|&g| row[g]).collect(),
            gallery: order,
            ap,
        });
    }
    let evaluated = scores.rows - skipped.len();
    if !skipped.is_empty() {
        log::warn!("{} queries have no valid positive and were skipped", skipped.len());
    }
    let denom = evaluated.max(1) as f64;
    let mut acc = 0usize;
    let cmc = first_hit
        .iter()
        .map(|&h| {
            acc += h;
            acc as f64 / denom
        })
        .collect();
    Ok(RankingResult {
        queries,
        map: if evaluated > 0 { ap_sum.div(denom).value() } else { 0.0 },
        cmc,
        evaluated,
        skipped,
    })
}

/// Expected AP of a uniformly random ranking of `n` items holding `r`
/// positives: `H_n / n + (r − 1)(n − H_n) / (n(n − 1))`.
pub fn expected_random_ap(n: usize, r: usize) -> f64 {
    if r == 0 || n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let h: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    let rest = if n > 1 {
        (r as f64 - 1.0) * (nf - h) / (nf * (nf - 1.0))
    } else {
        0.0
    };
    h / nf + rest
}

/// Mean of [`expected_random_ap`] over the queries that have positives.
pub fn random_map_expectation(labels: &RetrievalLabels<'_>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for q in 0..labels.query_ids.len() {
        let (mut n, mut r) = (0, 0);
        for g in 0..labels.gallery_ids.len() {
            let excluded = labels.query_ids[q] == labels.gallery_ids[g] && labels.query_cams[q] == labels.gallery_cams[g];
            if !excluded {
                n += 1;
                r += usize::from(labels.gallery_ids[g] == labels.query_ids[q]);
            }
        }
        if r > 0 {
            sum += expected_random_ap(n, r);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fusion: FusionMode,
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub queries: usize,
    pub gallery: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub random_map: f64,
}

impl EvalReport {
    pub fn new(fusion: FusionMode, result: &RankingResult, labels: &RetrievalLabels<'_>) -> Self {
        Self {
            fusion,
            map: result.map,
            top1: result.top(1),
            top5: result.top(5),
            top10: result.top(10),
            queries: labels.query_ids.len(),
            gallery: labels.gallery_ids.len(),
            evaluated: result.evaluated,
            skipped: result.skipped.len(),
            random_map: random_map_expectation(labels),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fusion     {}", self.fusion.name());
        let _ = writeln!(s, "mAP        {:.4}", self.map);
        let _ = writeln!(s, "top-1      {:.4}", self.top1);
        let _ = writeln!(s, "top-5      {:.4}", self.top5);
        let _ = writeln!(s, "top-10     {:.4}", self.top10);
        let _ = writeln!(s, "queries    {} ({} evaluated, {} skipped)", self.queries, self.evaluated, self.skipped);
        let _ = writeln!(s, "gallery    {}", self.gallery);
        let _ = writeln!(s, "random mAP {:.4}", self.random_map);
        s
    }

    /// Writes `report_<fusion>.txt` and `report_<fusion>.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = format!("report_{}", self.fusion.name());
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Score matrices of both streams for a query and gallery set.
#[derive(Debug, Clone)]
pub struct StreamScores {
    pub ds: ScoreMatrix,
    pub di: ScoreMatrix,
}

pub fn stream_scores(
    model: &TalModel,
    query: &ReidDataset,
    gallery: &ReidDataset,
    norm: &PixelNorm,
) -> Result<StreamScores> {
    let (qi, gi) = (query.images(), gallery.images());
    let mut per_stream = Vec::with_capacity(2);
    for stream in [Stream::Ds, Stream::Di] {
        let qf = model.features_for(&qi, norm, stream)?;
        let gf = model.features_for(&gi, norm, stream)?;
        per_stream.push(model.pairwise_scores(&qf, &gf)?);
    }
    let di = per_stream.pop().unwrap();
    let ds = per_stream.pop().unwrap();
    Ok(StreamScores { ds, di })
}

/// Owned identity and camera columns of a query/gallery pair.
#[derive(Debug, Clone)]
pub struct LabelColumns {
    pub query_ids: Vec<i64>,
    pub gallery_ids: Vec<i64>,
    pub query_cams: Vec<u32>,
    pub gallery_cams: Vec<u32>,
}

impl LabelColumns {
    pub fn new(query: &ReidDataset, gallery: &ReidDataset) -> Self {
        Self {
            query_ids: query.raw_identities(),
            gallery_ids: gallery.raw_identities(),
            query_cams: query.cameras(),
            gallery_cams: gallery.cameras(),
        }
    }

    pub fn view(&self) -> RetrievalLabels<'_> {
        RetrievalLabels {
            query_ids: &self.query_ids,
            gallery_ids: &self.gallery_ids,
            query_cams: &self.query_cams,
            gallery_cams: &self.gallery_cams,
        }
    }
}

pub fn evaluate_scores(
    scores: &StreamScores,
    labels: &RetrievalLabels<'_>,
    fusion: FusionMode,
) -> Result<(RankingResult, EvalReport)> {
    let fused = fuse_scores(&scores.ds, &scores.di, fusion)?;
    let result = compute_map_cmc(&fused, labels)?;
    let report = EvalReport::new(fusion, &result, labels);
    Ok((result, report))
}

/// Extracts both streams, fuses, ranks and summarizes.
pub fn evaluate(
    model: &TalModel,
    query: &ReidDataset,
    gallery: &ReidDataset,
    norm: &PixelNorm,
    fusion: FusionMode,
) -> Result<(RankingResult, EvalReport)> {
    let scores = stream_scores(model, query, gallery, norm)?;
    let labels = LabelColumns::new(query, gallery);
    evaluate_scores(&scores, &labels.view(), fusion)
}

/// One row per query: the query image, then its top-`k` gallery images with
/// a green border for matches and red otherwise.
pub fn ranking_grid(result: &RankingResult, query: &ReidDataset, gallery: &ReidDataset, rows: usize, k: usize) -> Result<RgbImage> {
    let first = query
        .records
        .first()
        .ok_or_else(|| Error::Data("empty query set".into()))?;
    let (w, h) = first.image.dimensions();
    let border = 2;
    let (cw, ch) = (w + 2 * border, h + 2 * border);
    let rows = rows.min(result.queries.len());
    let mut grid = RgbImage::from_pixel(cw * (k as u32 + 1) + 4, ch * rows as u32, Rgb([255, 255, 255]));
    for (row, qr) in result.queries.iter().take(rows).enumerate() {
        let y = row as u32 * ch;
        let q = &query.records[qr.query];
        imageops::overlay(&mut grid, q.image.as_ref(), border as i64, (y + border) as i64);
        for (j, &g) in qr.gallery.iter().take(k).enumerate() {
            let rec = &gallery.records[g];
            let color = if rec.raw_identity == q.raw_identity {
                Rgb([0, 200, 0])
            } else {
                Rgb([220, 0, 0])
            };
            let x = cw * (j as u32 + 1) + 4;
            for dy in 0..ch {
                for dx in 0..cw {
                    grid.put_pixel(x + dx, y + dy, color);
                }
            }
            let img = imageops::resize(rec.image.as_ref(), w, h, imageops::FilterType::Nearest);
            imageops::overlay(&mut grid, &img, (x + border) as i64, (y + border) as i64);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels<'a>(q: &'a [i64], g: &'a [i64], qc: &'a [u32], gc: &'a [u32]) -> RetrievalLabels<'a> {
        RetrievalLabels {
            query_ids: q,
            gallery_ids: g,
            query_cams: qc,
            gallery_cams: gc,
        }
    }

    #[test]
    fn hand_ap() {
        let s = ScoreMatrix::new(1, 3, vec![0.9, 0.5, 0.1]).unwrap();
        let r = compute_map_cmc(&s, &labels(&[1], &[1, 2, 1], &[1], &[2, 2, 2])).unwrap();
        assert_eq!(r.map, 5.0 / 6.0);
        assert_eq!(r.cmc, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn rational_aps_are_correctly_rounded() {
        assert_eq!(average_precision(&[true, false, true]), Some(5.0 / 6.0));
        // (1 + 2/4 + 3/5) / 3
        assert_eq!(average_precision(&[true, false, false, true, true]), Some(0.7));
        assert_eq!(average_precision(&[false, false, true]), Some(1.0 / 3.0));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn same_camera_matches_are_excluded() {
        let s = ScoreMatrix::new(1, 3, vec![0.9, 0.5, 0.1]).unwrap();
        let r = compute_map_cmc(&s, &labels(&[1], &[1, 2, 1], &[1], &[1, 2, 2])).unwrap();
        assert_eq!(r.queries[0].gallery, vec![1, 2]);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn query_without_positive_is_skipped() {
        let s = ScoreMatrix::new(2, 2, vec![0.9, 0.5, 0.2, 0.1]).unwrap();
        let r = compute_map_cmc(&s, &labels(&[1, 3], &[1, 2], &[1, 1], &[2, 2])).unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.evaluated, 1);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn ties_follow_gallery_order() {
        let s = ScoreMatrix::new(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        let r = compute_map_cmc(&s, &labels(&[1], &[2, 1, 2], &[1], &[2, 2, 2])).unwrap();
        assert_eq!(r.queries[0].gallery, vec![0, 1, 2]);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn hand_fusion() {
        let ds = ScoreMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let di = ScoreMatrix::new(2, 3, vec![0.0, 0.0, 0.0, 0.0, 0.0, 6.0]).unwrap();
        let f = fuse_scores(&ds, &di, FusionMode::Sum).unwrap();
        let sd_ds = (17.5f64 / 6.0).sqrt();
        let sd_di = 5.0f64.sqrt();
        let expect = [
            -2.5 / sd_ds - 1.0 / sd_di,
            -1.5 / sd_ds - 1.0 / sd_di,
            -0.5 / sd_ds - 1.0 / sd_di,
            0.5 / sd_ds - 1.0 / sd_di,
            1.5 / sd_ds - 1.0 / sd_di,
            2.5 / sd_ds + 5.0 / sd_di,
        ];
        for (a, b) in f.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(fuse_scores(&ds, &ScoreMatrix::new(3, 2, vec![0.0; 6]).unwrap(), FusionMode::Sum).is_err());
    }

    #[test]
    fn random_ap_small_cases() {
        assert_eq!(expected_random_ap(1, 1), 1.0);
        // n = 2, one positive: AP is 1 or 1/2
        assert!((expected_random_ap(2, 1) - 0.75).abs() < 1e-12);
        assert!((expected_random_ap(5, 5) - 1.0).abs() < 1e-12);
    }
}
