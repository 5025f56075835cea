use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{finding_names, synth_image, synth_report, FindingSet};
use crate::encoders::ImageGrid;
use crate::error::{Error, Result};
use crate::metrics::NUM_LABELS;

pub const SCHEMA_VERSION: u32 = 1;
pub const IMAGE_MAGIC: [u8; 4] = *b"RGXI";
pub const MIN_CORPUS: usize = 10;

/// Target frequency of 0, 1, 2, 3 and 4 findings per sample.
pub const FINDING_COUNT_DIST: [f64; 5] = [0.2, 0.35, 0.25, 0.15, 0.05];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: usize,
    pub image: ImageGrid,
    pub report: String,
    pub findings: FindingSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    /// split tag per sample
    pub splits: Vec<Split>,
    pub seed: u64,
    pub version: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&PairedSample> {
        self.indices(split).into_iter().map(|i| &self.samples[i]).collect()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.samples
            .first()
            .map_or((0, 0), |s| (s.image.height(), s.image.width()))
    }
}

fn sample_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index as u64) << 2 | stream);
    rng
}

fn draw_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in FINDING_COUNT_DIST.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    FINDING_COUNT_DIST.len() - 1
}

/// Sample `index` of the corpus with seed `seed`; independent of every other sample.
pub fn synth_sample(seed: u64, index: usize, size: usize) -> PairedSample {
    let mut rng = sample_rng(seed, index, 0);
    let k = draw_count(&mut rng);
    let all: Vec<usize> = (0..NUM_LABELS).collect();
    let mut labels: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
    labels.sort_unstable();
    let findings = FindingSet::place(&labels, &mut rng);
    let image_seed: u64 = sample_rng(seed, index, 1).random();
    let report_seed: u64 = sample_rng(seed, index, 2).random();
    PairedSample {
        id: index,
        image: synth_image(&findings, image_seed, size),
        report: synth_report(&findings, report_seed),
        findings,
    }
}

/// `n` paired samples at `size x size`, split 7:1:2 with the same seed.
pub fn generate_corpus(n: usize, seed: u64, size: usize) -> Result<Dataset> {
    if n < MIN_CORPUS {
        return Err(Error::contract(format!("corpus needs at least {MIN_CORPUS} samples, got {n}")));
    }
    let samples = (0..n).map(|i| synth_sample(seed, i, size)).collect();
    let mut ds = Dataset {
        samples,
        splits: vec![Split::Train; n],
        seed,
        version: SCHEMA_VERSION,
    };
    split(&mut ds, seed);
    Ok(ds)
}

/// `(floor(0.7 n), floor(0.1 n), rest)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Re-tags samples with a seeded shuffle.
pub fn split(ds: &mut Dataset, seed: u64) {
    let n = ds.len();
    let (train, val, _) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5151_7a7a));
    ds.splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        ds.splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
}

#[derive(Serialize, Deserialize)]
struct ReportRecord {
    id: usize,
    text: String,
    labels: Vec<String>,
    split: Split,
    findings: FindingSet,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub const IMAGES_FILE: &str = "images.bin";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = ds.image_size();
    {
        let mut f = BufWriter::new(File::create(dir.join(IMAGES_FILE))?);
        f.write_all(&IMAGE_MAGIC)?;
        f.write_all(&ds.version.to_le_bytes())?;
        f.write_all(&(h as u32).to_le_bytes())?;
        f.write_all(&(w as u32).to_le_bytes())?;
        f.write_all(&(ds.len() as u64).to_le_bytes())?;
        for s in &ds.samples {
            if (s.image.height(), s.image.width()) != (h, w) {
                return Err(Error::contract(format!("sample {} has a different image size", s.id)));
            }
            f.write_all(&s.image.to_u8())?;
        }
        f.flush()?;
    }
    {
        let mut f = BufWriter::new(File::create(dir.join(REPORTS_FILE))?);
        for (s, split) in ds.samples.iter().zip(&ds.splits) {
            let rec = ReportRecord {
                id: s.id,
                text: s.report.clone(),
                labels: finding_names(&s.findings.labels()),
                split: *split,
                findings: s.findings.clone(),
            };
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    let count = |sp| ds.splits.iter().filter(|&&s| s == sp).count();
    let manifest = Manifest {
        schema_version: ds.version,
        seed: ds.seed,
        count: ds.len(),
        height: h,
        width: w,
        train: count(Split::Train),
        val: count(Split::Val),
        test: count(Split::Test),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let img_path = dir.join(IMAGES_FILE);
    let mut bytes = Vec::new();
    File::open(&img_path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(&img_path, format!("header truncated at {} bytes", bytes.len())));
    }
    if bytes[..4] != IMAGE_MAGIC {
        return Err(Error::format(
            &img_path,
            format!("bad magic: expected {:?}, found {:?}", IMAGE_MAGIC, &bytes[..4]),
        ));
    }
    let version = read_u32(&bytes, 4);
    if version != SCHEMA_VERSION {
        return Err(Error::format(
            &img_path,
            format!("unsupported version: expected {SCHEMA_VERSION}, found {version}"),
        ));
    }
    let h = read_u32(&bytes, 8) as usize;
    let w = read_u32(&bytes, 12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let block = h * w * 3;
    let expected = HEADER_LEN + count * block;
    if bytes.len() != expected {
        return Err(Error::format(
            &img_path,
            format!("expected {expected} bytes for {count} images, found {}", bytes.len()),
        ));
    }

    let rep_path = dir.join(REPORTS_FILE);
    let mut records = Vec::with_capacity(count);
    for (i, line) in BufReader::new(File::open(&rep_path)?).lines().enumerate() {
        let rec: ReportRecord = serde_json::from_str(&line?)
            .map_err(|e| Error::format(&rep_path, format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    if records.len() != count {
        return Err(Error::format(
            &rep_path,
            format!("expected {count} records, found {}", records.len()),
        ));
    }
    let man_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&man_path)?)
        .map_err(|e| Error::format(&man_path, e.to_string()))?;
    if manifest.count != count || manifest.schema_version != version {
        return Err(Error::format(&man_path, "manifest disagrees with images.bin"));
    }

    let mut samples = Vec::with_capacity(count);
    let mut splits = Vec::with_capacity(count);
    for (i, rec) in records.into_iter().enumerate() {
        let off = HEADER_LEN + i * block;
        samples.push(PairedSample {
            id: rec.id,
            image: ImageGrid::from_u8(h, w, &bytes[off..off + block])?,
            report: rec.text,
            findings: rec.findings,
        });
        splits.push(rec.split);
    }
    Ok(Dataset {
        samples,
        splits,
        seed: manifest.seed,
        version,
    })
}
