//! Writes a synthetic dataset in the CIFAR binary record layout, reads it
//! back, and shows the channel statistics and a shuffled batch plan.
//!
//!     cargo run --example data_io -- [CIFAR_BIN]
//!
//! With a path argument the file is parsed as CIFAR-10 instead.

use crld::data::{
    encode_cifar_binary, load_cifar_binary, parse_cifar_binary, synthetic_pair, BatchPlan, CifarVariant, Split,
    SyntheticSpec,
};

fn main() -> crld::Result<()> {
    let ds = match std::env::args().nth(1) {
        Some(path) => load_cifar_binary(path.as_ref(), CifarVariant::Cifar10, Split::Train)?,
        None => {
            let spec = SyntheticSpec {
                seed: 9,
                num_classes: 10,
                per_class: 5,
                size: 32,
            };
            let (ds, _) = synthetic_pair(&spec, 1)?;
            let bytes = encode_cifar_binary(&ds, CifarVariant::Cifar10)?;
            println!("encoded {} records into {} bytes", ds.len(), bytes.len());
            let back = parse_cifar_binary(&bytes, CifarVariant::Cifar10, Split::Train)?;
            assert_eq!(back.images, ds.images);
            back
        }
    };
    println!("{} images, {} classes", ds.len(), ds.num_classes);
    println!("channel mean {:?}", ds.stats.mean);
    println!("channel std  {:?}", ds.stats.std);
    let plan = BatchPlan::new(0, 0, ds.len(), 16)?;
    for (i, b) in plan.batches().iter().enumerate() {
        println!("batch {i}: {:?}", &b[..b.len().min(8)]);
    }
    Ok(())
}
