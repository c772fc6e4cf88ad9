//! The teacher is an exponential moving average of the student: with the
//! student frozen, the gap shrinks by exactly the momentum each update.

use driftlab::model::{ema_update, init_params, teacher_student_distance, Activation, HeadSpec, MlpSpec};
use driftlab::Rng;

fn main() -> driftlab::Result<()> {
    let enc = MlpSpec::new(vec![8, 16, 4], Activation::Relu)?;
    let head = HeadSpec {
        embed: 4,
        hidden: 8,
        activation: Activation::Relu,
    };
    let mut pair = init_params(&enc, &head, 0.9, &Rng::new(4))?;
    // Move the student away from the teacher so there is a gap to close.
    for (i, t) in pair.trainable_mut().enumerate() {
        *t = t.map(|v| v + 0.1 * (i + 1) as f64);
    }
    let d0 = teacher_student_distance(&pair);
    for step in 1..=20 {
        ema_update(&mut pair, 0.9)?;
        if step % 5 == 0 {
            let d = teacher_student_distance(&pair);
            println!(
                "step {step:>2}: distance {d:.6}, ratio to start {:.6}, 0.9^{step} = {:.6}",
                d / d0,
                0.9f64.powi(step)
            );
        }
    }
    Ok(())
}
