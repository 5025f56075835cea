//! Procedural chest-film-like images and template reports.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::ImageGrid;
use crate::metrics::{label_names, LabelVector, NUM_LABELS};

pub const NOISE_STD: f64 = 0.02;

/// One pathology with its placement in normalized `[0, 1]` image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub label: usize,
    /// horizontal centre
    pub x: f64,
    /// vertical centre
    pub y: f64,
    pub extent: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FindingSet {
    pub findings: Vec<Finding>,
}

// label -> (home x, home y, base extent)
const HOME: [(f64, f64, f64); NUM_LABELS] = [
    (0.50, 0.28, 0.10), // enlarged_cardiomediastinum: wide upper band
    (0.56, 0.64, 0.20), // cardiomegaly: large heart blob
    (0.70, 0.34, 0.10), // lung_opacity: soft blob, right upper
    (0.30, 0.30, 0.07), // lung_lesion: dense nodule, left upper
    (0.50, 0.50, 0.30), // edema: horizontal streaks over both lungs
    (0.30, 0.68, 0.10), // consolidation: dense blob, left lower
    (0.72, 0.70, 0.11), // pneumonia: mottled blob, right lower
    (0.30, 0.50, 0.12), // atelectasis: horizontal plate, left mid
    (0.80, 0.28, 0.09), // pneumothorax: dark crescent, right apex
    (0.50, 0.86, 0.10), // pleural_effusion: basal gradient
    (0.14, 0.50, 0.25), // pleural_other: lateral rim, left
    (0.16, 0.16, 0.10), // fracture: zigzag polyline, left upper ribs
    (0.50, 0.10, 0.45), // support_devices: bright tube from the top
    (0.50, 0.90, 0.07), // hernia: round blob below the heart
];

impl FindingSet {
    /// Draws placement parameters for the given labels.
    pub fn place<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> Self {
        let findings = labels
            .iter()
            .map(|&label| {
                let (hx, hy, he) = HOME[label];
                Finding {
                    label,
                    x: hx + rng.random_range(-0.03..=0.03),
                    y: hy + rng.random_range(-0.03..=0.03),
                    extent: he * rng.random_range(0.85..=1.15),
                    intensity: rng.random_range(0.3..=0.45),
                }
            })
            .collect();
        Self { findings }
    }

    pub fn labels(&self) -> LabelVector {
        LabelVector::from_indices(self.findings.iter().map(|f| f.label))
    }

    pub fn len(&self) -> usize {
        self.findings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

fn ellipse(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let dx = (px - cx) / rx;
    let dy = (py - cy) / ry;
    dx * dx + dy * dy
}

fn smooth_disc(d2: f64) -> f64 {
    if d2 >= 1.0 {
        0.0
    } else {
        1.0 - d2 * d2
    }
}

fn segment_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((px - a.0) * vx + (py - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * vx - px, a.1 + t * vy - py);
    (qx * qx + qy * qy).sqrt()
}

fn polyline(px: f64, py: f64, pts: &[(f64, f64)], width: f64) -> f64 {
    let d = pts
        .windows(2)
        .map(|w| segment_dist(px, py, w[0], w[1]))
        .fold(f64::INFINITY, f64::min);
    if d < width {
        1.0
    } else {
        0.0
    }
}

/// Additive contribution of one finding at a pixel centre.
fn signature(f: &Finding, px: f64, py: f64) -> f64 {
    let (x, y, e, s) = (f.x, f.y, f.extent, f.intensity);
    match f.label {
        0 => {
            if (px - x).abs() < e && (py - y).abs() < 0.15 {
                s
            } else {
                0.0
            }
        }
        1 | 2 | 13 => s * smooth_disc(ellipse(px, py, x, y, e, e * 0.85)),
        3 => 1.6 * s * smooth_disc(ellipse(px, py, x, y, e, e)).sqrt(),
        4 => {
            let band = ((py - y).abs() < e * 0.6) && ((px - 0.5).abs() > 0.06) && ((px - 0.5).abs() < 0.34);
            let stripe = ((py * 64.0 / 3.0).floor() as i64) % 2 == 0;
            if band && stripe {
                s
            } else {
                0.0
            }
        }
        5 => 1.3 * s * if ellipse(px, py, x, y, e, e * 0.8) < 1.0 { 1.0 } else { 0.0 },
        6 => {
            let m = smooth_disc(ellipse(px, py, x, y, e, e));
            let check = (((px * 32.0).floor() + (py * 32.0).floor()) as i64) % 2 == 0;
            s * m * if check { 1.2 } else { 0.5 }
        }
        7 => {
            if (px - x).abs() < e && (py - y).abs() < 0.03 {
                s
            } else {
                0.0
            }
        }
        8 => -1.4 * s * smooth_disc(ellipse(px, py, x, y, e * 0.7, e * 1.4)),
        9 => {
            let t = ((py - (y - e)) / (2.0 * e)).clamp(0.0, 1.0);
            if (px - 0.5).abs() > 0.06 && (px - 0.5).abs() < 0.4 {
                s * t
            } else {
                0.0
            }
        }
        10 => {
            if (px - x).abs() < 0.035 && (py - y).abs() < e {
                s
            } else {
                0.0
            }
        }
        11 => {
            let pts = [
                (x - e, y - e * 0.3),
                (x - e * 0.3, y + e * 0.3),
                (x + e * 0.3, y - e * 0.3),
                (x + e, y + e * 0.3),
            ];
            1.4 * s * polyline(px, py, &pts, 0.025)
        }
        12 => {
            let pts = [(x, 0.0), (x, y + e * 0.5), (x + 0.1, y + e)];
            1.6 * s * polyline(px, py, &pts, 0.02)
        }
        _ => 0.0,
    }
}

/// Anatomy without findings or noise, one gray value per pixel.
fn anatomy(px: f64, py: f64) -> f64 {
    let mut v = 0.08;
    if ellipse(px, py, 0.30, 0.52, 0.16, 0.32) < 1.0 || ellipse(px, py, 0.70, 0.52, 0.16, 0.32) < 1.0 {
        v += 0.35;
    }
    if (px - 0.5).abs() < 0.025 {
        v += 0.4;
    }
    v + 0.12 * smooth_disc(ellipse(px, py, 0.56, 0.64, 0.13, 0.11))
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic render of `findings` at `size x size`, gray replicated over channels
/// with independent Gaussian noise, quantized to 8-bit levels.
pub fn synth_image(findings: &FindingSet, seed: u64, size: usize) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut pixels = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        let py = (r as f64 + 0.5) / size as f64;
        for c in 0..size {
            let px = (c as f64 + 0.5) / size as f64;
            let mut v = anatomy(px, py);
            for f in &findings.findings {
                v += signature(f, px, py);
            }
            for _ in 0..3 {
                pixels.push(quantize(v + noise.sample(&mut rng)));
            }
        }
    }
    ImageGrid::new(size, size, pixels).expect("consistent buffer")
}

// label -> (noun phrase, location, negated phrase)
const PHRASES: [(&str, &str, &str); NUM_LABELS] = [
    ("widened mediastinum", "at the level of the aortic arch", "widened mediastinum"),
    ("cardiomegaly", "with an enlarged cardiac silhouette", "cardiomegaly"),
    ("patchy opacity", "in the right upper lobe", "focal opacity"),
    ("small nodule", "in the left upper lobe", "pulmonary nodule"),
    ("mild pulmonary edema", "in both lungs", "pulmonary edema"),
    ("focal consolidation", "in the left lower lobe", "focal consolidation"),
    ("pneumonia", "in the right lower lobe", "pneumonia"),
    ("linear atelectasis", "in the left mid lung", "atelectasis"),
    ("small pneumothorax", "at the right apex", "pneumothorax"),
    ("pleural effusion", "at both lung bases", "pleural effusion"),
    ("pleural thickening", "along the left lateral chest wall", "pleural thickening"),
    ("healed rib fracture", "in the left upper ribs", "displaced fracture"),
    ("endotracheal tube", "with the tip above the carina", "support device"),
    ("small hiatal hernia", "below the heart", "hernia"),
];

pub const CLOSING: &str = "the osseous structures and upper abdomen are otherwise unremarkable for the age of the patient .";

/// One of three phrasings for a present finding.
pub fn finding_sentence(label: usize, variant: usize) -> String {
    let (np, loc, _) = PHRASES[label];
    match variant % 3 {
        0 => format!("there is {np} {loc} ."),
        1 => format!("{np} is seen {loc} ."),
        _ => format!("findings are consistent with {np} {loc} ."),
    }
}

pub fn negation_sentence(label: usize) -> String {
    format!("there is no {} .", PHRASES[label].2)
}

/// Finding sentences in seeded order, negations of two seeded absent labels, then the closing sentence.
pub fn synth_report(findings: &FindingSet, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let present = findings.labels();
    let mut sentences: Vec<String> = findings
        .findings
        .iter()
        .map(|f| finding_sentence(f.label, rng.random_range(0..3)))
        .collect();
    sentences.shuffle(&mut rng);
    let absent: Vec<usize> = (0..NUM_LABELS).filter(|&i| !present.get(i)).collect();
    let mut neg: Vec<usize> = absent.choose_multiple(&mut rng, 2).copied().collect();
    neg.sort_unstable();
    sentences.extend(neg.into_iter().map(negation_sentence));
    sentences.push(CLOSING.to_string());
    sentences.join(" ")
}

/// Label names of a finding set, in label order.
pub fn finding_names(labels: &LabelVector) -> Vec<String> {
    labels.positives().into_iter().map(|i| label_names()[i].clone()).collect()
}
