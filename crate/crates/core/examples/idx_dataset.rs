//! Streams a labeled IDX dataset under tailed drift. Synthetic 4×4 "images"
//! are written first so the example is self-contained.

use driftlab::stream::{
    encode_idx_images, encode_idx_labels, load_idx, sample_batch, DriftSchedule, LabeledDataset, Source,
};
use driftlab::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("driftlab-idx-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut rng = Rng::new(8);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..400 {
        let label = (i % 5) as u8;
        labels.push(label);
        pixels.extend((0..16).map(|p| {
            if p % 5 == label as usize {
                200
            } else {
                rng.below(40) as u8
            }
        }));
    }
    let images_path = dir.join("images.idx");
    let labels_path = dir.join("labels.idx");
    std::fs::write(&images_path, encode_idx_images(4, 4, &pixels))?;
    std::fs::write(&labels_path, encode_idx_labels(&labels))?;

    let (x, y) = load_idx(&images_path, &labels_path)?;
    println!("loaded {} images of {} pixels", x.rows(), x.cols());
    // Label 4 is held out as the OOD pool.
    let data = LabeledDataset::new(x, y, &[4])?;
    println!(
        "{} in-distribution classes, {} OOD rows",
        data.num_classes(),
        data.ood_pool().rows()
    );

    let source = Source::Dataset(data);
    let schedule = DriftSchedule::Tailed {
        imbalance_ratio: 20.0,
        ramp_steps: 10,
    };
    for t in [0, 10] {
        let batch = sample_batch(&source, &schedule, t, 500, &Rng::new(9))?;
        let mut counts = vec![0; 4];
        for &c in &batch.class_ids {
            counts[c] += 1;
        }
        println!("t={t:>2}: class counts {counts:?}");
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
