//! Synthetic paired image/report corpus.

mod dataset;
mod synth;

pub use dataset::{
    generate_corpus, load, save, split, split_sizes, synth_sample, Dataset, Manifest, PairedSample, Split,
    FINDING_COUNT_DIST, IMAGES_FILE, IMAGE_MAGIC, MANIFEST_FILE, MIN_CORPUS, REPORTS_FILE, SCHEMA_VERSION,
};
pub use synth::{
    finding_names, finding_sentence, negation_sentence, synth_image, synth_report, Finding, FindingSet, CLOSING,
    NOISE_STD,
};
