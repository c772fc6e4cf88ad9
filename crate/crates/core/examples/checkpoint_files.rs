//! Saves and reloads a checkpoint and a tensor file, and shows the header
//! bytes of each format.

use driftlab::model::{init_params, load_checkpoint, save_checkpoint, Activation, HeadSpec, MlpSpec};
use driftlab::stream::{load_tensor, save_tensor};
use driftlab::{Rng, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("driftlab-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let enc = MlpSpec::new(vec![6, 12, 4], Activation::Relu)?;
    let head = HeadSpec {
        embed: 4,
        hidden: 8,
        activation: Activation::Relu,
    };
    let pair = init_params(&enc, &head, 0.99, &Rng::new(6))?;
    let ck_path = dir.join("model.rcpk");
    save_checkpoint(&ck_path, &pair, &serde_json::json!({ "step": 0, "note": "fresh init" }))?;
    let back = load_checkpoint(&ck_path)?;
    println!("checkpoint round trip equal: {}, meta {}", back.pair == pair, back.meta);

    let t = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])?;
    let t_path = dir.join("t.rcpt");
    save_tensor(&t_path, &t)?;
    println!("tensor round trip equal: {}", load_tensor(&t_path)? == t);

    for p in [&ck_path, &t_path] {
        let bytes = std::fs::read(p)?;
        let head: Vec<String> = bytes.iter().take(12).map(|b| format!("{b:02x}")).collect();
        println!(
            "{}: {} bytes, starts {}",
            p.file_name().unwrap().to_string_lossy(),
            bytes.len(),
            head.join(" ")
        );
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
