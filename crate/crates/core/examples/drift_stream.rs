//! Generates a Gaussian-mixture source and shows how each drift schedule
//! changes the class distribution and class means over time.

use driftlab::stream::{
    class_probs, drift_witness, sample_batch, DriftSchedule, MeanTransform, MixtureConfig, Source, SourceModel,
};
use driftlab::Rng;

fn main() -> driftlab::Result<()> {
    let mix = MixtureConfig {
        num_classes: 5,
        dim: 8,
        ..MixtureConfig::default()
    };
    let model = SourceModel::generate(&mix, &Rng::new(1).split("source"))?;

    let tailed = DriftSchedule::Tailed {
        imbalance_ratio: 50.0,
        ramp_steps: 100,
    };
    for t in [0, 50, 100, 400] {
        let p = class_probs(&tailed, mix.num_classes, t)?;
        let cells: Vec<String> = p.data().iter().map(|v| format!("{v:.3}")).collect();
        println!("tailed t={t:>3}: p = [{}]", cells.join(", "));
    }

    let schedules = [
        DriftSchedule::Stationary,
        tailed.clone(),
        DriftSchedule::Sudden {
            switch_step: 60,
            post_transform: MeanTransform::Cycle { by: 2 },
        },
        DriftSchedule::Gradual {
            start_step: 20,
            end_step: 80,
            target: MeanTransform::Translate {
                offset: vec![1.0; mix.dim],
            },
        },
    ];
    for s in &schedules {
        match drift_witness(&model, s, 200, 1e-6)? {
            Some((t, gap)) => println!("{:<10} first change at t={t}, L1 gap {gap:.2e}", s.kind()),
            None => println!("{:<10} no change over 200 steps", s.kind()),
        }
    }

    let source = Source::Mixture(model);
    let batch = sample_batch(&source, &tailed, 400, 1000, &Rng::new(2))?;
    let mut counts = vec![0; mix.num_classes];
    for &c in &batch.class_ids {
        counts[c] += 1;
    }
    println!("1000 draws at t=400, per class: {counts:?}");
    Ok(())
}
