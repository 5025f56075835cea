mod patch;
mod text;
mod vision;
mod vocab;

pub use patch::{patch_grid, patchify, unpatchify, ImageGrid};
pub use text::{TextConfig, TextEncoder};
pub use vision::{l2_normalize, EncoderMode, VisionConfig, PIXEL_MEAN, PIXEL_STD, VisionEncoder, VisionOutput, VisualTokenSequence};
pub use vocab::{normalize, normalize_text, Report, Vocab, BOS, EOS, PAD, UNK};
