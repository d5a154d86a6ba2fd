use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataSource, DatasetSplit, ImageRef, MemeRecord, SplitName};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub const SYNTHETIC_IMAGE_SIZE: u32 = 224;

/// Caption vocabulary per text cue; the two sets are disjoint.
const CUE_WORDS: [[&str; 6]; 2] = [
    ["sunshine", "garden", "picnic", "puppy", "laughter", "festival"],
    ["thunder", "alley", "rubble", "shadow", "riot", "smoke"],
];
const FILLER_WORDS: [&str; 8] = ["the", "a", "with", "today", "look", "at", "this", "my"];

/// Cue assignment for one synthetic meme. The label is the XOR of the cues,
/// so each cue alone is uninformative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticMemeSpec {
    pub image_cue: u8,
    pub text_cue: u8,
    pub seed: u64,
}

impl SyntheticMemeSpec {
    pub fn label(&self) -> u8 {
        self.image_cue ^ self.text_cue
    }
}

/// Generates `n` XOR confounder memes. Each (image cue, text cue) pair occurs
/// `n/4` times (±1), in a seed-determined order.
pub fn generate_synthetic_confounders(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 4 {
        return Err(Error::arg(format!(
            "synthetic dataset needs at least 4 records, got {n}"
        )));
    }
    let mut rng = seeded_rng(seed, "synthetic-confounders");
    let mut combos: Vec<(u8, u8)> = (0..n).map(|i| (((i % 4) / 2) as u8, (i % 2) as u8)).collect();
    combos.shuffle(&mut rng);
    let records = combos
        .into_iter()
        .enumerate()
        .map(|(i, (image_cue, text_cue))| {
            let spec = SyntheticMemeSpec {
                image_cue,
                text_cue,
                seed: rng.random(),
            };
            MemeRecord {
                id: format!("synth{seed}-{i:05}"),
                image_ref: ImageRef::Synthetic {
                    image_cue,
                    seed: spec.seed,
                },
                text: compose_caption(text_cue, &mut rng),
                label: Some(spec.label()),
            }
        })
        .collect();
    Ok(DatasetSplit {
        name: SplitName::Train,
        source: DataSource::Synthetic,
        records,
    })
}

fn compose_caption(text_cue: u8, rng: &mut impl Rng) -> String {
    let n_cue = rng.random_range(3..=5);
    let n_fill = rng.random_range(1..=2);
    let mut words: Vec<&str> = Vec::with_capacity(n_cue + n_fill);
    for _ in 0..n_cue {
        words.push(CUE_WORDS[text_cue as usize].choose(rng).expect("non-empty"));
    }
    for _ in 0..n_fill {
        words.push(FILLER_WORDS.choose(rng).expect("non-empty"));
    }
    words.shuffle(rng);
    words.join(" ")
}

/// Recovers the (image cue, text cue) of a synthetic record.
pub fn synthetic_cues(record: &MemeRecord) -> Option<(u8, u8)> {
    let image_cue = match record.image_ref {
        ImageRef::Synthetic { image_cue, .. } => image_cue,
        ImageRef::File(_) => return None,
    };
    let mut hits = [0usize; 2];
    for w in record.text.split_whitespace() {
        for (cue, set) in CUE_WORDS.iter().enumerate() {
            if set.contains(&w) {
                hits[cue] += 1;
            }
        }
    }
    let text_cue = match hits {
        [a, 0] if a > 0 => 0,
        [0, b] if b > 0 => 1,
        _ => return None,
    };
    Some((image_cue, text_cue))
}

/// Renders the 224×224 canvas for a synthetic image: a dark (cue 0) or light
/// (cue 1) tinted background with one randomly placed colored sticker.
pub fn render_synthetic_image(image_cue: u8, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: i32 = if image_cue == 0 { 55 } else { 195 };
    let level = base + rng.random_range(-20..=20);
    let tint: [i32; 3] = std::array::from_fn(|_| rng.random_range(-12..=12));
    let bg = Rgb(std::array::from_fn(|c| (level + tint[c]).clamp(0, 255) as u8));
    let size = SYNTHETIC_IMAGE_SIZE;
    let mut img = RgbImage::from_pixel(size, size, bg);
    let w = rng.random_range(24..=72);
    let h = rng.random_range(24..=72);
    let x0 = rng.random_range(0..size - w);
    let y0 = rng.random_range(0..size - h);
    let sticker = Rgb(std::array::from_fn(|_| rng.random::<u8>()));
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img.put_pixel(x, y, sticker);
        }
    }
    img
}

/// Splits a synthetic set by position into train / dev_seen / test_unseen.
/// The generator's order is already seed-shuffled, so a prefix split is random.
pub fn partition_synthetic(
    split: &DatasetSplit,
    dev_fraction: f64,
    test_fraction: f64,
) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
    if !(0.0..1.0).contains(&dev_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || dev_fraction + test_fraction >= 1.0
    {
        return Err(Error::arg(format!(
            "invalid partition fractions dev={dev_fraction} test={test_fraction}"
        )));
    }
    let n = split.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_dev = ((n as f64) * dev_fraction).round() as usize;
    let n_train = n - n_test - n_dev;
    let take = |name: SplitName, range: std::ops::Range<usize>| DatasetSplit {
        name,
        source: split.source,
        records: split.records[range].to_vec(),
    };
    Ok((
        take(SplitName::Train, 0..n_train),
        take(SplitName::DevSeen, n_train..n_train + n_dev),
        take(SplitName::TestUnseen, n_train + n_dev..n),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn combo_counts(split: &DatasetSplit) -> [usize; 4] {
        let mut counts = [0; 4];
        for r in &split.records {
            let (i, t) = synthetic_cues(r).expect("synthetic record");
            counts[(i * 2 + t) as usize] += 1;
        }
        counts
    }

    #[test]
    fn sixteen_records_half_positive() {
        let split = generate_synthetic_confounders(16, 0).unwrap();
        assert_eq!(split.len(), 16);
        assert_eq!(split.records.iter().filter(|r| r.label == Some(1)).count(), 8);
    }

    #[test]
    fn regeneration_is_identical() {
        assert_eq!(
            generate_synthetic_confounders(16, 0).unwrap(),
            generate_synthetic_confounders(16, 0).unwrap()
        );
        assert_ne!(
            generate_synthetic_confounders(16, 0).unwrap(),
            generate_synthetic_confounders(16, 1).unwrap()
        );
    }

    #[test]
    fn hundred_records_split_evenly_over_cues() {
        let split = generate_synthetic_confounders(100, 7).unwrap();
        assert_eq!(combo_counts(&split), [25, 25, 25, 25]);
    }

    #[test]
    fn too_few_records_is_an_argument_error() {
        assert!(matches!(
            generate_synthetic_confounders(3, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn labels_are_xor_of_cues() {
        let split = generate_synthetic_confounders(64, 3).unwrap();
        for r in &split.records {
            let (i, t) = synthetic_cues(r).unwrap();
            assert_eq!(r.label, Some(i ^ t));
        }
    }

    #[test]
    fn rendering_is_deterministic_and_cue_dependent() {
        let a = render_synthetic_image(0, 11);
        assert_eq!(a, render_synthetic_image(0, 11));
        assert_eq!(a.dimensions(), (224, 224));
        let mean = |img: &RgbImage| {
            img.pixels().map(|p| p.0.iter().map(|&c| c as f64).sum::<f64>()).sum::<f64>()
                / (3.0 * 224.0 * 224.0)
        };
        assert!(mean(&render_synthetic_image(1, 11)) > mean(&a));
    }

    #[test]
    fn partition_covers_everything_in_order() {
        let split = generate_synthetic_confounders(100, 1).unwrap();
        let (tr, dev, te) = partition_synthetic(&split, 0.1, 0.2).unwrap();
        assert_eq!((tr.len(), dev.len(), te.len()), (70, 10, 20));
        let joined: Vec<_> = tr
            .records
            .iter()
            .chain(&dev.records)
            .chain(&te.records)
            .cloned()
            .collect();
        assert_eq!(joined, split.records);
    }
}
