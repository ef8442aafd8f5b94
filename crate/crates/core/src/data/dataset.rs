use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    /// Directory name in the market-style layout.
    pub fn market_dir(self) -> &'static str {
        match self {
            Split::Train => "bounding_box_train",
            Split::Query => "query",
            Split::Gallery => "bounding_box_test",
        }
    }

    pub fn csv_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Query => "query.csv",
            Split::Gallery => "gallery.csv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `<split dir>/<pid>_c<cam>s<seq>_<frame>_<box>.<ext>`
    Market,
    /// `<split>.csv` with columns `path,identity,camera,domain`.
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageLabel {
    pub identity: usize,
    pub camera: u32,
    pub domain: usize,
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image: Arc<RgbImage>,
    pub path: Option<PathBuf>,
    /// Dense identity within the dataset (`0..num_identities`).
    pub identity: usize,
    /// Identity as written in the source; query and gallery are matched on it.
    pub raw_identity: i64,
    pub camera: u32,
    /// 0-based source domain.
    pub domain: usize,
}

impl ImageRecord {
    pub fn label(&self) -> ImageLabel {
        ImageLabel {
            identity: self.identity,
            camera: self.camera,
            domain: self.domain,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReidDataset {
    pub name: String,
    pub split: Split,
    pub records: Vec<ImageRecord>,
    num_identities: usize,
}

impl ReidDataset {
    /// Builds a dataset, assigning dense identities in ascending raw-id order.
    pub fn from_records(name: impl Into<String>, split: Split, mut records: Vec<ImageRecord>) -> Self {
        let mut ids: BTreeMap<i64, usize> = BTreeMap::new();
        for r in &records {
            ids.entry(r.raw_identity).or_insert(0);
        }
        for (dense, v) in ids.values_mut().enumerate() {
            *v = dense;
        }
        for r in &mut records {
            r.identity = ids[&r.raw_identity];
        }
        Self {
            name: name.into(),
            split,
            records,
            num_identities: ids.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    /// Record indices of every dense identity.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_identities];
        for (i, r) in self.records.iter().enumerate() {
            members[r.identity].push(i);
        }
        members
    }

    pub fn raw_identities(&self) -> Vec<i64> {
        self.records.iter().map(|r| r.raw_identity).collect()
    }

    pub fn cameras(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.camera).collect()
    }

    pub fn images(&self) -> Vec<&RgbImage> {
        self.records.iter().map(|r| r.image.as_ref()).collect()
    }

    /// Distinct domain ids present, ascending.
    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.records.iter().map(|r| r.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }
}

/// `0002_c1s1_000451_03.jpg` → `(2, 1)`.
pub fn parse_market_name(file_name: &str) -> Option<(i64, u32)> {
    let stem = file_name.rsplit_once('.').map_or(file_name, |(s, _)| s);
    let mut parts = stem.split('_');
    let pid: i64 = parts.next()?.parse().ok()?;
    let cam_seq = parts.next()?;
    let frame = parts.next()?;
    let bbox = parts.next()?;
    if parts.next().is_some() {
        return None;
    }
    let rest = cam_seq.strip_prefix('c')?;
    let (cam, seq) = rest.split_once('s')?;
    let cam: u32 = cam.parse().ok()?;
    seq.parse::<u32>().ok()?;
    frame.parse::<u64>().ok()?;
    bbox.parse::<u32>().ok()?;
    Some((pid, cam))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Domain assigned to every record; `None` takes the CSV column
    /// (1-based) or 0 for the market layout.
    pub domain: Option<usize>,
    /// Replace the domain by the (densely remapped) camera id.
    pub camera_as_domain: bool,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

fn read_image(path: &Path) -> Result<Arc<RgbImage>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Arc::new(img.to_rgb8()))
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    path: String,
    identity: i64,
    camera: u32,
    domain: usize,
}

pub fn load_dataset(root: &Path, layout: Layout, split: Split, opts: LoadOptions) -> Result<ReidDataset> {
    let mut records = Vec::new();
    match layout {
        Layout::Market => {
            let dir = root.join(split.market_dir());
            let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            paths.sort();
            for path in paths {
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let (pid, camera) = parse_market_name(name)
                    .ok_or_else(|| Error::Data(format!("unparseable file name {}", path.display())))?;
                if pid < 0 {
                    continue;
                }
                records.push(ImageRecord {
                    image: read_image(&path)?,
                    path: Some(path.clone()),
                    identity: 0,
                    raw_identity: pid,
                    camera,
                    domain: opts.domain.unwrap_or(0),
                });
            }
        }
        Layout::Csv => {
            let file = root.join(split.csv_name());
            let mut reader = csv::Reader::from_path(&file)
                .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
            for row in reader.deserialize::<CsvRow>() {
                let row = row.map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
                let path = root.join(&row.path);
                records.push(ImageRecord {
                    image: read_image(&path)?,
                    path: Some(path),
                    identity: 0,
                    raw_identity: row.identity,
                    camera: row.camera,
                    domain: opts.domain.unwrap_or(row.domain.saturating_sub(1)),
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no images found for split {split:?} under {}",
            root.display()
        )));
    }
    if opts.camera_as_domain {
        let mut cams: Vec<u32> = records.iter().map(|r| r.camera).collect();
        cams.sort_unstable();
        cams.dedup();
        for r in &mut records {
            r.domain = cams.binary_search(&r.camera).expect("camera present");
        }
    }
    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok(ReidDataset::from_records(name, split, records))
}

/// Union of source datasets with identities kept disjoint across sources.
pub fn hybrid_view(datasets: &[ReidDataset]) -> Result<ReidDataset> {
    if datasets.is_empty() {
        return Err(Error::Data("hybrid view needs at least one dataset".into()));
    }
    if datasets.len() == 1 {
        return Ok(datasets[0].clone());
    }
    let mut records = Vec::with_capacity(datasets.iter().map(|d| d.len()).sum());
    let mut offset = 0;
    for d in datasets {
        records.extend(d.records.iter().cloned().map(|mut r| {
            r.identity += offset;
            r.raw_identity = r.identity as i64;
            r
        }));
        offset += d.num_identities();
    }
    Ok(ReidDataset {
        name: "hybrid".into(),
        split: Split::Train,
        records,
        num_identities: offset,
    })
}

/// One dataset per domain id present, ascending; identities are remapped
/// densely inside each part.
pub fn split_by_domain(dataset: &ReidDataset) -> Vec<ReidDataset> {
    dataset
        .domains()
        .into_iter()
        .map(|d| {
            let records = dataset.records.iter().filter(|r| r.domain == d).cloned().collect();
            ReidDataset::from_records(format!("{}#{}", dataset.name, d + 1), dataset.split, records)
        })
        .collect()
}
