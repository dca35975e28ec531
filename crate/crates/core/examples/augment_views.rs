//! Draws weak and strong views of a synthetic image and writes them as PPM
//! files, printing the operations and strengths each strong view applied.
//!
//!     cargo run --example augment_views -- [OUT_DIR]

use std::path::PathBuf;

use crld::augment::{strong_view_traced, weak_view, StrongPolicy};
use crld::data::{synthetic_pair, SyntheticSpec};
use crld::rng::{Lane, RngStream};

fn main() -> crld::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/augment_views".into()));
    std::fs::create_dir_all(&out).map_err(|e| crld::CrldError::io(&out, e))?;
    let spec = SyntheticSpec {
        seed: 2,
        num_classes: 4,
        per_class: 1,
        size: 32,
    };
    let (train, _) = synthetic_pair(&spec, 1)?;
    let img = &train.images[0];

    for (n, p_s) in [(1, 0.5), (2, 1.0), (3, 1.0)] {
        let policy = StrongPolicy::new(n, p_s)?;
        let weak = weak_view(img, &mut RngStream::new(7, Lane::WeakView, 0, 0));
        let (strong, ops) = strong_view_traced(img, &policy, &mut RngStream::new(7, Lane::StrongView, 0, 0));
        let tag = format!("n{n}_ps{p_s}");
        for (name, view) in [("weak", &weak), ("strong", &strong)] {
            let path = out.join(format!("{tag}_{name}.ppm"));
            std::fs::write(&path, view.to_ppm()).map_err(|e| crld::CrldError::io(&path, e))?;
        }
        let trace: Vec<String> = ops.iter().map(|o| format!("{}:{:.3}", o.kind, o.v)).collect();
        println!("{tag}: {}", trace.join(" "));
    }
    println!("views written to {}", out.display());
    Ok(())
}
