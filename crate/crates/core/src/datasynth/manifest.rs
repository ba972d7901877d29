//! Dataset materialization: renders records to PNG files and writes the
//! JSONL manifest consumed by evaluation and offline scoring.

use super::grammar::GrammarConfig;
use super::render::{render_record, RenderConfig};
use super::{generate_record, Category, GrayImage, Person, Record, TaggedWord};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.iter().copied().find(|v| v.as_str() == s)
    }
}

/// Full description of a synthetic dataset. Rerunning `build_dataset` with
/// an equal config reproduces identical bytes on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_records: usize,
    /// Train/valid/test proportions; must sum to 1.
    pub split_fractions: [f64; 3],
    pub base_seed: u64,
    pub grammar: GrammarConfig,
    pub render: RenderConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_records: 200,
            split_fractions: [0.8, 0.1, 0.1],
            base_seed: 0,
            grammar: GrammarConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_records == 0 {
            return Err(Error::config("n_records must be positive"));
        }
        for f in self.split_fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("split fractions must lie in [0, 1]"));
            }
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        self.grammar.validate()?;
        self.render.validate()
    }

    /// Record counts per split via cumulative rounding, so they always sum
    /// to `n_records` and 100 x [0.8, 0.1, 0.1] lands exactly on 80/10/10.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.n_records as f64;
        let mut counts = [0usize; 3];
        let mut cum = 0.0;
        let mut prev = 0usize;
        for (i, f) in self.split_fractions.iter().enumerate() {
            cum += f;
            let upto = (cum * n).round().min(n) as usize;
            counts[i] = upto - prev;
            prev = upto;
        }
        counts[2] += self.n_records - prev;
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestWord {
    pub t: String,
    pub c: Option<Category>,
    pub p: Option<Person>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub words: Vec<ManifestWord>,
}

/// One JSONL row: annotation truth plus the image path relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub image: String,
    pub lines: Vec<ManifestLine>,
    pub split: Split,
}

impl ManifestRow {
    pub fn from_record(rec: &Record, image: String, split: Split) -> Self {
        ManifestRow {
            id: rec.id.clone(),
            image,
            lines: rec
                .lines
                .iter()
                .map(|line| ManifestLine {
                    words: line
                        .iter()
                        .map(|w| ManifestWord {
                            t: w.text.clone(),
                            c: w.category,
                            p: w.person,
                        })
                        .collect(),
                })
                .collect(),
            split,
        }
    }

    pub fn to_record(&self) -> Record {
        Record {
            id: self.id.clone(),
            lines: self
                .lines
                .iter()
                .map(|line| {
                    line.words
                        .iter()
                        .map(|w| TaggedWord {
                            text: w.t.clone(),
                            category: w.c,
                            person: w.p,
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

/// A dataset on disk: the manifest rows plus the directory they resolve
/// image paths against.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn rows_for(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn image_path(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.image)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }
}

/// Generates `cfg.n_records` records, renders each to
/// `out_dir/images/<id>.png` and writes `out_dir/manifest.jsonl`. Records are
/// assigned to splits in index order: train block, then valid, then test.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let counts = cfg.split_counts();
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)?;

    let mut rows = Vec::with_capacity(cfg.n_records);
    let mut manifest = Vec::new();
    for i in 0..cfg.n_records {
        let seed = cfg.base_seed + i as u64;
        let rec = generate_record(seed, &cfg.grammar)?;
        let img = render_record(&rec, seed, &cfg.render)?;
        let rel = format!("images/{}.png", rec.id);
        save_png(&img, &out_dir.join(&rel))?;
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Valid
        } else {
            Split::Test
        };
        let row = ManifestRow::from_record(&rec, rel, split);
        serde_json::to_writer(&mut manifest, &row)?;
        manifest.push(b'\n');
        rows.push(row);
    }
    fs::write(out_dir.join("manifest.jsonl"), manifest)?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        rows,
    })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let file = fs::File::open(path)?;
    let mut rows = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        rows.push(row);
    }
    Ok(DatasetManifest { root, rows })
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| Error::shape("pixel buffer does not match image dimensions"))?;
    // `save` would sniff the format from the extension; pin it to PNG so
    // output bytes never depend on the caller's path.
    let mut out = fs::File::create(path)?;
    image::write_buffer_with_format(
        &mut std::io::BufWriter::new(&mut out),
        buf.as_raw(),
        buf.width(),
        buf.height(),
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )?;
    out.flush()?;
    Ok(())
}

/// Loads a PNG (or any supported format) as grayscale. Line boxes are not
/// stored on disk, so the result carries none; only block extraction during
/// in-memory corpus assembly needs them.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let img = image::ImageReader::open(path)?
        .decode()
        .map_err(Error::from)?
        .to_luma8();
    Ok(GrayImage {
        width: img.width() as usize,
        height: img.height() as usize,
        pixels: img.into_raw(),
        line_boxes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(n: usize) -> DatasetConfig {
        DatasetConfig {
            n_records: n,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn split_counts_land_on_exact_proportions() {
        let cfg = tiny_cfg(100);
        assert_eq!(cfg.split_counts(), [80, 10, 10]);
        let cfg = tiny_cfg(7);
        let counts = cfg.split_counts();
        assert_eq!(counts.iter().sum::<usize>(), 7);
    }

    #[test]
    fn bad_fractions_rejected() {
        let mut cfg = tiny_cfg(10);
        cfg.split_fractions = [0.8, 0.1, 0.2];
        assert!(cfg.validate().is_err());
        cfg.split_fractions = [1.1, -0.1, 0.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn build_read_round_trip_and_determinism() {
        let cfg = tiny_cfg(12);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let built = build_dataset(&cfg, &a).unwrap();
        build_dataset(&cfg, &b).unwrap();

        let bytes_a = fs::read(a.join("manifest.jsonl")).unwrap();
        let bytes_b = fs::read(b.join("manifest.jsonl")).unwrap();
        assert_eq!(bytes_a, bytes_b);

        let first_img = &built.rows[0].image;
        assert_eq!(
            fs::read(a.join(first_img)).unwrap(),
            fs::read(b.join(first_img)).unwrap()
        );

        let back = read_manifest(&a.join("manifest.jsonl")).unwrap();
        assert_eq!(back.rows, built.rows);

        for row in &back.rows {
            let rec = row.to_record();
            assert_eq!(ManifestRow::from_record(&rec, row.image.clone(), row.split), *row);
            let img = load_image(&back.image_path(row)).unwrap();
            assert!(img.width > 0 && img.height > 0);
            assert!(img.pixels.iter().any(|&p| p < 128), "image {} has no ink", row.id);
        }
    }

    #[test]
    fn splits_are_disjoint_blocks_in_configured_proportions() {
        let mut cfg = tiny_cfg(20);
        cfg.split_fractions = [0.8, 0.1, 0.1];
        let dir = tempfile::tempdir().unwrap();
        let built = build_dataset(&cfg, dir.path()).unwrap();
        let count = |s: Split| built.rows_for(s).count();
        assert_eq!(
            [count(Split::Train), count(Split::Valid), count(Split::Test)],
            [16, 2, 2]
        );
        let mut ids: Vec<&str> = built.rows.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn manifest_rows_match_spec_shape() {
        let cfg = tiny_cfg(1);
        let dir = tempfile::tempdir().unwrap();
        let built = build_dataset(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(built.manifest_path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["id", "image", "lines", "split"]);
        let word = &v["lines"][0]["words"][0];
        let mut wkeys: Vec<_> = word.as_object().unwrap().keys().map(String::as_str).collect();
        wkeys.sort_unstable();
        assert_eq!(wkeys, ["c", "p", "t"]);
    }
}
